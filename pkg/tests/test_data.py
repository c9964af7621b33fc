import numpy as np
import pytest
from PIL import Image

from rgbdsal import data as D
from rgbdsal.errors import ConfigError, DataError


def iou(a, b):
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def linear_probe_iou(feats, gts):
    """Least-squares linear classifier on per-pixel features, best threshold, pooled IoU."""
    X = np.concatenate([f.reshape(f.shape[0], -1).T for f in feats])
    X = np.hstack([X, np.ones((len(X), 1))])
    y = np.concatenate([g.ravel() for g in gts]).astype(float)
    score = X @ np.linalg.lstsq(X, y, rcond=None)[0]
    return max(iou(score > t, y > 0) for t in np.linspace(score.min(), score.max(), 64))


def is_blue(rgb):
    return (rgb[2] > 0.7) & (rgb[0] < 0.35) & (rgb[1] < 0.5)


def test_same_seed_is_bit_identical():
    a = D.generate_synthetic_scene(7, cue_mode="joint")
    b = D.generate_synthetic_scene(7, cue_mode="joint")
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)
    np.testing.assert_array_equal(a.gt, b.gt)
    assert a.metadata == b.metadata


def test_zero_objects_give_empty_mask():
    s = D.generate_synthetic_scene(3, object_count=0)
    assert s.gt.sum() == 0


@pytest.mark.parametrize("mode", D.CUE_MODES)
def test_value_ranges(mode):
    s = D.generate_synthetic_scene(11, cue_mode=mode)
    assert s.rgb.shape == (3, 32, 32) and s.depth.shape == (1, 32, 32)
    assert s.rgb.min() >= 0 and s.rgb.max() <= 1 and s.depth.min() >= 0 and s.depth.max() <= 1
    assert set(np.unique(s.gt)) <= {0, 1} and s.gt.sum() > 0


@pytest.mark.parametrize("size,kw", [(30, {"min_size": 8}), (4, {}), (32, {"min_size": 64})])
def test_invalid_size(size, kw):
    with pytest.raises(ConfigError):
        D.generate_synthetic_scene(0, size=size, **kw)


def test_bad_cue_mode():
    with pytest.raises(ConfigError):
        D.generate_synthetic_scene(0, cue_mode="audio")


def test_depth_only_cues():
    ds = D.generate_dataset(30, seed=1, cue_mode="depth-only")
    gts = [s.gt for s in ds]
    assert np.mean([iou(s.depth[0] > 0.75, s.gt > 0) for s in ds]) > 0.9
    assert linear_probe_iou([s.rgb for s in ds], gts) < 0.3


def test_rgb_only_cues():
    ds = D.generate_dataset(30, seed=1, cue_mode="rgb-only")
    assert np.mean([iou(is_blue(s.rgb), s.gt > 0) for s in ds]) > 0.9
    assert all(np.all(s.depth == 0.5) for s in ds)


def test_joint_needs_both_modalities():
    ds = D.generate_dataset(100, seed=2, cue_mode="joint")
    gts = [s.gt for s in ds]
    assert linear_probe_iou([s.rgb for s in ds], gts) < 0.6
    assert linear_probe_iou([D.encode_depth(s.depth) for s in ds], gts) < 0.6
    both = np.mean([iou(is_blue(s.rgb) & (s.depth[0] > 0.75), s.gt > 0) for s in ds])
    assert both > 0.95


def test_dataset_splits_are_disjoint():
    tr = D.generate_dataset(5, seed=0)
    te = D.generate_dataset(5, seed=0, split="test")
    assert not set(tr.ids) & set(te.ids)
    assert te.split == "test"
    assert not D.generate_dataset(2, labeled=False).labeled


def test_duplicate_ids_rejected():
    s = D.generate_synthetic_scene(0)
    with pytest.raises(DataError):
        D.Dataset([s, s])


def test_sample_validation():
    s = D.generate_synthetic_scene(0)
    with pytest.raises(DataError):
        D.RgbdSample("x", s.rgb, s.depth, gt=np.full((32, 32), 2, np.uint8))
    with pytest.raises(DataError):
        D.RgbdSample("x", s.rgb, s.depth[:, :16])


def test_encode_depth_examples():
    enc = D.encode_depth(np.full((1, 6, 6), 0.5))
    np.testing.assert_array_equal(enc[0], 0.5)
    np.testing.assert_array_equal(enc[1], 0.5)
    np.testing.assert_array_equal(enc[2], 0.0)

    ramp = np.tile(np.linspace(0, 1, 8), (8, 1))[None]
    g = D.encode_depth(ramp)[2]
    assert g.min() > 0
    np.testing.assert_allclose(g, g[0, 0], atol=1e-12)


def test_encode_depth_complementary_channels():
    for seed in range(20):
        d = np.random.default_rng(seed).random((1, 9, 7))
        enc = D.encode_depth(d)
        np.testing.assert_allclose(enc[0] + enc[1], 1.0, atol=1e-15)
        assert enc.min() >= 0 and enc.max() <= 1


def test_encode_depth_nonfinite():
    d = np.zeros((1, 4, 4))
    d[0, 1, 1] = np.nan
    with pytest.raises(DataError, match="s42"):
        D.encode_depth(d, "s42")


def test_normalize_constant():
    np.testing.assert_array_equal(D.normalize_depth(np.full((3, 3), 7.0)), 0.5)


def test_batch_shapes():
    ds = D.generate_dataset(3)
    x, y = D.batch(ds.samples, "depth")
    assert x.shape == (3, 3, 32, 32) and y.shape == (3, 1, 32, 32)
    x, y = D.batch(D.generate_dataset(2, labeled=False).samples, "rgb")
    assert y is None
    with pytest.raises(ConfigError):
        D.batch(ds.samples, "thermal")


@pytest.mark.parametrize("mode", ["joint", "rgb-only"])
def test_save_load_round_trip(tmp_path, mode):
    ds = D.generate_dataset(4, seed=3, cue_mode=mode)
    D.save_dataset(ds, tmp_path)
    back = D.load_dataset(tmp_path)
    assert back.ids == ds.ids and back.labeled
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.gt, b.gt)
        assert b.gt.dtype == np.uint8 and set(np.unique(b.gt)) <= {0, 1}
        assert a.metadata == b.metadata


def test_unlabeled_when_gt_missing(tmp_path):
    D.save_dataset(D.generate_dataset(3, labeled=False), tmp_path)
    assert not D.load_dataset(tmp_path).labeled


def test_eight_bit_depth_is_accepted(tmp_path):
    ds = D.generate_dataset(1)
    D.save_dataset(ds, tmp_path)
    sid = ds.ids[0]
    Image.fromarray(np.tile(np.arange(0, 256, 8, dtype=np.uint8), (32, 1))).save(tmp_path / "depth" / f"{sid}.png")
    d = D.load_dataset(tmp_path)[0].depth
    assert d.min() == 0 and d.max() == 1


def test_orphan_ids_listed(tmp_path):
    ds = D.generate_dataset(3)
    D.save_dataset(ds, tmp_path)
    (tmp_path / "depth" / f"{ds.ids[1]}.png").unlink()
    with pytest.raises(DataError, match=ds.ids[1]):
        D.load_dataset(tmp_path)


def test_unreadable_file(tmp_path):
    ds = D.generate_dataset(2)
    D.save_dataset(ds, tmp_path)
    bad = tmp_path / "rgb" / f"{ds.ids[0]}.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DataError, match=str(bad.name)):
        D.load_dataset(tmp_path)
