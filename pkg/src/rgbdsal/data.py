"""Synthetic RGB-D scenes, the 3-channel depth encoding, and PNG datasets.

Scenes are textured backgrounds with up to three flat shapes. The salient
object is marked by a cue that depends on ``cue_mode``:

``rgb-only``   salient object is blue, distractors other colours, depth flat
``depth-only`` salient object is near, distractors mid-depth, all objects
               camouflaged in the background texture
``joint``      salient iff blue AND near; one distractor is blue but mid-depth,
               one is near but not blue, so neither modality decides alone
``redundant``  salient object is blue and near, distractors neither (used for
               unlabeled distillation pairs, where both modalities agree)

Depth is 1 for the nearest surface and 0 for the farthest after per-image
min-max normalisation; constant maps normalise to 0.5.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

CUE_MODES = ("rgb-only", "depth-only", "joint", "redundant")

TARGET_COLOR = np.array([0.15, 0.30, 0.90])
DISTRACTOR_COLORS = np.array(
    [
        [0.85, 0.20, 0.15],
        [0.20, 0.75, 0.25],
        [0.90, 0.80, 0.15],
        [0.80, 0.45, 0.70],
    ]
)
NEAR = (0.85, 0.95)
MID = (0.42, 0.55)
FAR = (0.10, 0.28)


@dataclass
class RgbdSample:
    id: str
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    depth: np.ndarray  # (1, H, W) in [0, 1]
    gt: np.ndarray = None  # (H, W) uint8 in {0, 1}
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.rgb.shape[1:]
        if self.rgb.shape[0] != 3 or self.depth.shape != (1, h, w):
            raise DataError(f"sample {self.id}: rgb {self.rgb.shape} and depth {self.depth.shape} disagree")
        if self.gt is not None:
            if self.gt.shape != (h, w):
                raise DataError(f"sample {self.id}: gt {self.gt.shape} does not match {h}x{w}")
            if not np.isin(self.gt, (0, 1)).all():
                raise DataError(f"sample {self.id}: gt is not binary")


@dataclass
class Dataset:
    samples: list
    split: str = "train"

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids: {dup}")

    @property
    def labeled(self):
        return all(s.gt is not None for s in self.samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self):
        return [s.id for s in self.samples]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _smooth_noise(rng, h, w, cell=4):
    coarse = rng.standard_normal((h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    ty, tx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def _shape_mask(rng, h, w, taken):
    yy, xx = np.mgrid[0:h, 0:w]
    best = None
    for _ in range(40):
        kind = "ellipse" if rng.random() < 0.6 else "rect"
        ry = rng.uniform(0.13, 0.22) * h
        rx = rng.uniform(0.13, 0.22) * w
        cy = rng.uniform(ry, h - ry)
        cx = rng.uniform(rx, w - rx)
        if kind == "ellipse":
            m = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
        else:
            m = (np.abs(yy + 0.5 - cy) <= ry * 0.85) & (np.abs(xx + 0.5 - cx) <= rx * 0.85)
        overlap = (m & taken).sum()
        desc = {"shape": kind, "center": [round(float(cy), 3), round(float(cx), 3)],
                "radius": [round(float(ry), 3), round(float(rx), 3)]}
        if overlap == 0:
            return m, desc
        if best is None or overlap < best[0]:
            best = (overlap, m, desc)
    return best[1], best[2]


def _object_roles(cue_mode, count):
    """(is_salient, colour role, depth role) for each object, salient first."""
    if cue_mode == "joint":
        roles = [(True, "target", "near"), (False, "target", "mid"), (False, "other", "near")]
    elif cue_mode == "rgb-only":
        roles = [(True, "target", "flat"), (False, "other", "flat"), (False, "other", "flat")]
    elif cue_mode == "depth-only":
        roles = [(True, "camo", "near"), (False, "camo", "mid"), (False, "camo", "mid")]
    else:
        roles = [(True, "target", "near"), (False, "other", "mid"), (False, "other", "mid")]
    return roles[:count]


def generate_synthetic_scene(seed, size=32, object_count=3, cue_mode="joint", min_size=1):
    """Deterministic synthetic RGB-D sample for ``seed``."""
    if cue_mode not in CUE_MODES:
        raise ConfigError(f"cue mode must be one of {CUE_MODES}, got {cue_mode!r}")
    if size < min_size or size % min_size or size < 8:
        raise ConfigError(f"scene size {size} must be >= 8 and a multiple of {min_size}")
    if not 0 <= object_count <= 3:
        raise ConfigError(f"object_count must be in 0..3, got {object_count}")
    rng = np.random.default_rng([int(seed), CUE_MODES.index(cue_mode)])
    h = w = size

    base = rng.uniform(0.35, 0.6) + rng.uniform(-0.06, 0.06, size=3)
    base[2] = min(base[2], base[:2].min())
    texture = 0.10 * _smooth_noise(rng, h, w) + 0.03 * rng.standard_normal((h, w))
    rgb = np.clip(base[:, None, None] + texture[None] * np.array([1.0, 0.9, 0.8])[:, None, None], 0, 1)

    rows = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    depth = FAR[0] + (FAR[1] - FAR[0]) * rows + 0.01 * rng.standard_normal((h, w))

    roles = _object_roles(cue_mode, object_count)
    order = rng.permutation(len(roles))
    taken = np.zeros((h, w), bool)
    masks = [None] * len(roles)
    descs = [None] * len(roles)
    for idx in order:  # placement order is independent of role, so size and position carry no cue
        masks[idx], descs[idx] = _shape_mask(rng, h, w, taken)
        taken |= masks[idx]

    palette = rng.permutation(len(DISTRACTOR_COLORS))
    n_other = 0
    gt = np.zeros((h, w), np.uint8)
    for idx in order:
        salient, colour, depth_role = roles[idx]
        m = masks[idx]
        if colour == "target":
            col = np.clip(TARGET_COLOR + rng.uniform(-0.05, 0.05, 3), 0, 1)
        elif colour == "other":
            col = np.clip(DISTRACTOR_COLORS[palette[n_other % len(palette)]] + rng.uniform(-0.05, 0.05, 3), 0, 1)
            n_other += 1
        else:
            col = None
        if col is not None:
            px = col[:, None] + 0.03 * rng.standard_normal((3, m.sum()))
            rgb[:, m] = np.clip(px, 0, 1)
        if depth_role == "near":
            depth[m] = rng.uniform(*NEAR) + 0.01 * rng.standard_normal(m.sum())
        elif depth_role == "mid":
            depth[m] = rng.uniform(*MID) + 0.01 * rng.standard_normal(m.sum())
        gt[m] = 1 if salient else 0
        descs[idx].update({"salient": salient, "colour": colour, "depth": depth_role})

    if cue_mode == "rgb-only":
        depth = np.full((h, w), 0.5)
    else:
        depth = quantize(normalize_depth(depth), 65535)
    rgb = quantize(rgb, 255)
    meta = {"seed": int(seed), "cue_mode": cue_mode, "size": size, "objects": descs}
    return RgbdSample(id=f"s{int(seed):07d}", rgb=rgb, depth=depth[None], gt=gt, metadata=meta)


def quantize(x, levels):
    return np.round(np.clip(x, 0.0, 1.0) * levels) / levels


def normalize_depth(d):
    """Per-image min-max to [0, 1]; constant maps become 0.5."""
    lo, hi = float(np.min(d)), float(np.max(d))
    if hi - lo <= 0:
        return np.full(np.shape(d), 0.5)
    return (d - lo) / (hi - lo)


def generate_dataset(count, seed=0, size=32, object_count=3, cue_mode="joint", split="train", labeled=True):
    """``count`` scenes from consecutive seeds; test splits use a disjoint seed range."""
    offset = 1_000_000 if split == "test" else 0
    samples = []
    for i in range(count):
        s = generate_synthetic_scene(offset + seed * 10_000 + i, size, object_count, cue_mode)
        if not labeled:
            s.gt = None
        samples.append(s)
    return Dataset(samples, split=split)


# ---------------------------------------------------------------------------
# depth encoding
# ---------------------------------------------------------------------------


def encode_depth(depth, sample_id="?"):
    """(1, H, W) depth -> (3, H, W): depth, 1 - depth, rescaled gradient magnitude."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[0]
    if not np.all(np.isfinite(d)):
        raise DataError(f"sample {sample_id}: depth contains nonfinite values")
    gy, gx = np.gradient(d)
    mag = np.hypot(gy, gx)
    top = mag.max()
    mag = mag / top if top > 0 else np.zeros_like(mag)
    return np.stack([d, 1.0 - d, mag])


def batch(samples, modality):
    """Stack samples into network input (B, 3, H, W) and targets (B, 1, H, W) or None."""
    if modality == "rgb":
        x = np.stack([s.rgb for s in samples])
    elif modality == "depth":
        x = np.stack([encode_depth(s.depth, s.id) for s in samples])
    else:
        raise ConfigError(f"modality must be 'rgb' or 'depth', got {modality!r}")
    if all(s.gt is not None for s in samples):
        y = np.stack([s.gt[None].astype(np.float64) for s in samples])
    else:
        y = None
    return x, y


# ---------------------------------------------------------------------------
# on-disk layout: rgb/<id>.png, depth/<id>.png, gt/<id>.png
# ---------------------------------------------------------------------------


def save_dataset(dataset, root):
    root = Path(root)
    for sub in ("rgb", "depth", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    meta_lines = []
    for s in dataset:
        rgb8 = np.round(np.clip(s.rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb8, mode="RGB").save(root / "rgb" / f"{s.id}.png")
        d16 = np.round(np.clip(s.depth[0], 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(d16).save(root / "depth" / f"{s.id}.png")
        if s.gt is not None:
            Image.fromarray((s.gt * 255).astype(np.uint8), mode="L").save(root / "gt" / f"{s.id}.png")
        meta_lines.append(json.dumps({"id": s.id, **s.metadata}, sort_keys=True))
    (root / "samples.jsonl").write_text("".join(line + "\n" for line in meta_lines))


def _read_png(path):
    try:
        with Image.open(path) as im:
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_dataset(root, split="train"):
    root = Path(root)
    if not (root / "rgb").is_dir() or not (root / "depth").is_dir():
        raise DataError(f"{root}: expected rgb/ and depth/ subdirectories")
    rgb_ids = {p.stem for p in (root / "rgb").glob("*.png")}
    depth_ids = {p.stem for p in (root / "depth").glob("*.png")}
    orphans = sorted(rgb_ids ^ depth_ids)
    if orphans:
        raise DataError(f"{root}: ids without an rgb/depth partner: {', '.join(orphans)}")
    gt_dir = root / "gt"
    meta = {}
    if (root / "samples.jsonl").exists():
        for line in (root / "samples.jsonl").read_text().splitlines():
            rec = json.loads(line)
            meta[rec.pop("id")] = rec
    samples = []
    for sid in sorted(rgb_ids):
        rgb = _read_png(root / "rgb" / f"{sid}.png")
        if rgb.ndim != 3 or rgb.shape[2] < 3:
            raise DataError(f"{root / 'rgb' / (sid + '.png')}: expected a colour image")
        rgb = rgb[..., :3].transpose(2, 0, 1).astype(np.float64) / 255.0
        draw = _read_png(root / "depth" / f"{sid}.png")
        if draw.ndim != 2:
            raise DataError(f"{root / 'depth' / (sid + '.png')}: expected a grayscale image")
        depth = normalize_depth(draw.astype(np.float64))
        gt = None
        gpath = gt_dir / f"{sid}.png"
        if gpath.exists():
            g = _read_png(gpath)
            if g.ndim == 3:
                g = g[..., 0]
            gt = (g > 127).astype(np.uint8)
        samples.append(RgbdSample(id=sid, rgb=rgb, depth=depth[None], gt=gt, metadata=meta.get(sid, {})))
    return Dataset(samples, split=split)
