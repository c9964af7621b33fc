import numpy as np
import pytest

from rgbdsal import tensor as T
from rgbdsal.bpdc import (
    BpdcWeights,
    build_bpdc,
    collaborative_combine,
    combine_side_outputs,
    weight_values,
)
from rgbdsal.errors import ConfigError

from oracles import bpdc_unrolled


def make(levels, rng=None, size=16):
    params = build_bpdc(levels, "b")
    if rng is not None:
        for p in params.values():
            p.data[...] = rng.uniform(-1.0, 1.5, size=p.data.shape)
    weights = BpdcWeights(params, levels, "b")
    raw = [T.Tensor(np.random.default_rng(j).uniform(0.05, 0.95, size=(2, 1, size >> j, size >> j)))
           for j in range(len(levels))]
    return weights, raw


def test_initial_weights_are_uniform_means():
    params = build_bpdc((2, 3, 4), "b")
    assert params["b.self2"].item() == pytest.approx(1 / 3)
    assert params["b.pair2_4"].item() == pytest.approx(1 / 3)
    assert params["b.self3"].item() == pytest.approx(1 / 2)
    assert "b.self4" not in params
    assert params["b.collab4"].item() == pytest.approx(1 / 3)


def test_weight_counts():
    levels = (2, 3, 4, 5, 6)
    params = build_bpdc(levels, "b")
    assert sum(n.startswith("b.self") for n in params) == len(levels) - 1
    assert sum(n.startswith("b.pair") for n in params) == len(levels) * (len(levels) - 1) // 2


def test_uniform_init_preserves_constant_maps():
    levels = (2, 3, 4)
    weights = BpdcWeights(build_bpdc(levels, "b"), levels, "b")
    raw = [T.Tensor(np.full((1, 1, 8 >> j, 8 >> j), 0.3)) for j in range(3)]
    so = combine_side_outputs(raw, weights)
    for p in so.combined:
        np.testing.assert_allclose(p.data, 0.3, atol=1e-15)


def test_two_level_hand_unroll():
    params = build_bpdc((1, 2), "b")
    params["b.self1"].data[:] = 0.5
    params["b.pair1_2"].data[:] = 0.5
    weights = BpdcWeights(params, (1, 2), "b")
    raw = [T.Tensor(np.full((1, 1, 4, 4), 0.4)), T.Tensor(np.full((1, 1, 2, 2), 0.8))]
    so = combine_side_outputs(raw, weights)
    np.testing.assert_allclose(so.combined[0].data, 0.6, atol=1e-15)
    assert so.combined[0].shape == so.combined[1].shape == (1, 1, 4, 4)


def test_single_level_passes_through():
    weights = BpdcWeights(build_bpdc((3,), "b"), (3,), "b")
    raw = [T.Tensor(np.random.default_rng(0).random((1, 1, 4, 4)))]
    so = combine_side_outputs(raw, weights)
    assert so.combined[0] is raw[0]


def test_empty_raises():
    weights = BpdcWeights({}, (), "b")
    with pytest.raises(ConfigError):
        combine_side_outputs([], weights)


def test_level_count_mismatch_raises():
    weights, raw = make((2, 3, 4))
    with pytest.raises(ConfigError):
        combine_side_outputs(raw[:2], weights)


def test_top_level_is_reference_identical():
    weights, raw = make((2, 3, 4), np.random.default_rng(1))
    so = combine_side_outputs(raw, weights)
    assert so.combined[-1] is so.raw[-1]
    np.testing.assert_array_equal(so.raw[-1].data, T.upsample_bilinear(raw[-1], 4).data)


def test_zero_pair_weights_give_per_level_predictions():
    levels = (2, 3, 4)
    weights, raw = make(levels, np.random.default_rng(2))
    for n, p in weights.params.items():
        if ".pair" in n:
            p.data[:] = 0.0
    so = combine_side_outputs(raw, weights)
    for idx, lvl in enumerate(levels[:-1]):
        np.testing.assert_allclose(so.combined[idx].data, weights.self_weight(lvl).item() * so.raw[idx].data, atol=1e-15)


@pytest.mark.parametrize("k", [3, 4, 5, 6])
@pytest.mark.parametrize("seed", range(5))
def test_recursion_matches_unrolled_expansion(k, seed):
    levels = tuple(range(1, k + 1))
    weights, raw = make(levels, np.random.default_rng(seed), size=2 ** k)
    so = combine_side_outputs(raw, weights)
    expected = bpdc_unrolled([p.data for p in so.raw], levels, weight_values(weights))
    for got, ref in zip(so.combined, expected):
        np.testing.assert_allclose(got.data, ref, rtol=0, atol=1e-9)


def test_gradients_reach_every_self_and_pair_weight():
    levels = (2, 3, 4, 5)
    weights, raw = make(levels, np.random.default_rng(3))
    so = combine_side_outputs(raw, weights)
    y = (np.random.default_rng(4).random(so[2].shape) > 0.5).astype(float)
    T.backward(T.l2_loss(so[2], T.Tensor(y)))
    for n, p in weights.params.items():
        if ".collab" not in n:
            assert np.all(p.grad != 0), n


def test_collaborative_uniform_weights_over_identical_maps():
    levels = (2, 3, 4)
    weights = BpdcWeights(build_bpdc(levels, "b"), levels, "b")
    m = np.random.default_rng(5).random((1, 1, 8, 8))
    so = combine_side_outputs([T.Tensor(m), T.Tensor(m[..., ::2, ::2]), T.Tensor(m[..., ::4, ::4])], weights)
    so.combined = [T.Tensor(m)] * 3
    np.testing.assert_allclose(collaborative_combine(so, weights).data, m, atol=1e-15)


def test_collaborative_single_map_identity():
    weights = BpdcWeights(build_bpdc((3,), "b"), (3,), "b")
    weights.collab_weight(3).data[:] = 1.0
    m = T.Tensor(np.random.default_rng(6).random((1, 1, 4, 4)))
    so = combine_side_outputs([m], weights)
    np.testing.assert_array_equal(collaborative_combine(so, weights).data, m.data)


def test_collaborative_matches_scalar_loop():
    levels = (2, 3, 4)
    weights, raw = make(levels, np.random.default_rng(7), size=8)
    so = combine_side_outputs(raw, weights)
    out = collaborative_combine(so, weights).data
    ref = np.zeros_like(out)
    for idx, n in np.ndenumerate(ref):
        ref[idx] = sum(weights.collab_weight(lv).item() * so.combined[j].data[idx] for j, lv in enumerate(levels))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_getitem_by_level():
    weights, raw = make((2, 3, 4))
    so = combine_side_outputs(raw, weights)
    assert so[4] is so.combined[2]
