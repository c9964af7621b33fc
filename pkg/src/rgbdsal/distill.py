"""Stage 1 (RGB teacher) and stage 2 (hierarchical cross-modal distillation).

The teacher is trained with cross-entropy on every combined side-out plus the
collaborative joint map. The student, a copy of the teacher architecture fed
the 3-channel depth encoding, is trained without labels so that each of its
combined side-outs matches the frozen teacher's on the paired RGB image.
"""

import numpy as np

from . import data as D
from . import tensor as T
from .bpdc import collaborative_combine
from .errors import ConfigError, DataError
from .metrics import evaluate
from .stream import SaliencyStream
from .training import run_sgd, sum_terms

DEPTH_INIT_MODES = ("D-A", "D-B", "D-C")


def _stage(cfg, name, **overrides):
    st = cfg.stage(name)
    st.update({k: v for k, v in overrides.items() if v is not None})
    return st


def teacher_loss(side_outs, gt, weights):
    """Cross-entropy of each combined side-out and of their weighted joint map.

    Returns ``(total, terms)`` with one term per inference level plus ``joint``.
    """
    gt = T.as_tensor(gt)
    for p in side_outs.combined:
        if p.shape != gt.shape:
            raise ConfigError(f"side-out {p.shape} does not match ground truth {gt.shape}")
    terms = {}
    for lvl, p in zip(side_outs.levels, side_outs.combined):
        terms[f"level{lvl}"] = T.cross_entropy(T.clamp(p), gt)
    terms["joint"] = T.cross_entropy(T.clamp(collaborative_combine(side_outs, weights)), gt)
    return sum_terms(terms), terms


def hcd_loss(teacher_side_outs, student_side_outs):
    """Sum over levels of squared L2 distance between clamped side-outs, per sample."""
    t_list = teacher_side_outs.combined if hasattr(teacher_side_outs, "combined") else list(teacher_side_outs)
    s_list = student_side_outs.combined if hasattr(student_side_outs, "combined") else list(student_side_outs)
    if len(t_list) != len(s_list):
        raise ConfigError(f"teacher has {len(t_list)} side-outs, student {len(s_list)}")
    levels = getattr(student_side_outs, "levels", tuple(range(1, len(s_list) + 1)))
    terms = {}
    for lvl, t, s in zip(levels, t_list, s_list):
        t = T.as_tensor(t)
        if t.shape != s.shape:
            raise ConfigError(f"side-out resolution mismatch at level {lvl}: {t.shape} vs {s.shape}")
        batch = s.shape[0]
        terms[f"level{lvl}"] = T.scale(T.l2_loss(T.clamp(t), T.clamp(s)), 1.0 / batch)
    return sum_terms(terms), terms


def train_teacher(dataset, cfg, seed=None, lr=None, epochs=None, init=None, on_step=None, modality="rgb"):
    """Train a stream on labeled samples of one modality (RGB by default)."""
    for s in dataset:
        if s.gt is None:
            raise DataError(f"sample {s.id} has no ground-truth mask; teacher training needs labels")
    st = _stage(cfg, "teacher", lr=lr, epochs=epochs)
    seed = cfg.get("train.seed", 0) if seed is None else seed
    stream = init.copy() if init is not None else SaliencyStream.build(
        cfg.network, seed=seed, scale=cfg.get("train.init_scale", 1.0)
    )
    x_all, y_all = D.batch(dataset.samples, modality)

    def loss_fn(idx):
        out = stream.forward(x_all[idx])
        return teacher_loss(out.side_outs, y_all[idx], stream.bpdc)

    reports = run_sgd(
        "teacher", stream.parameters(), len(dataset), loss_fn,
        lr=st["lr"], momentum=cfg.get("train.momentum", 0.9), epochs=st["epochs"],
        batch_size=cfg.get("train.batch_size", 1), seed=seed, grad_clip=cfg.get("train.grad_clip"),
        on_step=on_step,
    )
    return stream, reports


def teacher_targets(teacher, x, chunk=64):
    """Frozen teacher's combined side-outs, one (N, 1, H, W) array per level."""
    outs = None
    with T.no_grad():
        for start in range(0, len(x), chunk):
            so = teacher.forward(x[start:start + chunk]).side_outs
            maps = [p.data for p in so.combined]
            outs = maps if outs is None else [np.concatenate([a, b]) for a, b in zip(outs, maps)]
    return outs


def init_student(cfg, teacher, mode="random", seed=0):
    if mode == "random":
        return SaliencyStream.build(cfg.network, seed=seed + 1, scale=cfg.get("train.init_scale", 1.0))
    if mode == "teacher":
        return teacher.copy()
    raise ConfigError(f"student_init must be 'random' or 'teacher', got {mode!r}")


def distill_student(dataset, teacher, cfg, seed=None, lr=None, epochs=None, student_init=None, on_step=None):
    """Train a depth student to reproduce the frozen teacher's side-outs.

    Masks in ``dataset`` are ignored. Returns ``(student, reports)``.
    """
    if teacher.config.hash() != cfg.network.hash():
        raise ConfigError("teacher architecture does not match the configured student architecture")
    st = _stage(cfg, "distill", lr=lr, epochs=epochs, student_init=student_init)
    seed = cfg.get("train.seed", 0) if seed is None else seed
    student = init_student(cfg, teacher, st.get("student_init", "random"), seed)

    x_rgb, _ = D.batch(dataset.samples, "rgb")
    x_dep, _ = D.batch(dataset.samples, "depth")
    before = {n: p.data.tobytes() for n, p in teacher.params.items()}
    targets = teacher_targets(teacher, x_rgb)
    levels = cfg.network.inference_levels

    def loss_fn(idx):
        out = student.forward(x_dep[idx])
        return hcd_loss([t[idx] for t in targets], _relabel(out.side_outs, levels))

    reports = run_sgd(
        "distill", student.parameters(), len(dataset), loss_fn,
        lr=st["lr"], momentum=cfg.get("train.momentum", 0.9), epochs=st["epochs"],
        batch_size=cfg.get("train.batch_size", 1), seed=seed, grad_clip=cfg.get("train.grad_clip"),
        on_step=on_step,
    )
    after = {n: p.data.tobytes() for n, p in teacher.params.items()}
    if before != after:  # pragma: no cover - guarded by no_grad
        raise RuntimeError("teacher parameters changed during distillation")
    return student, reports


def _relabel(side_outs, levels):
    side_outs.levels = tuple(levels)
    return side_outs


def mean_hcd(teacher, student, dataset):
    """Per-sample L_HCD averaged over ``dataset`` (no graph)."""
    x_rgb, _ = D.batch(dataset.samples, "rgb")
    x_dep, _ = D.batch(dataset.samples, "depth")
    t = teacher_targets(teacher, x_rgb)
    s = teacher_targets(student, x_dep)
    per_level = [float(np.sum((np.clip(a, T.EPS, 1 - T.EPS) - np.clip(b, T.EPS, 1 - T.EPS)) ** 2)) for a, b in zip(t, s)]
    return sum(per_level) / len(dataset)


def predict_maps(stream, dataset, modality, chunk=64):
    x, _ = D.batch(dataset.samples, modality)
    maps = np.concatenate([stream.predict(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    return {s.id: m for s, m in zip(dataset.samples, maps)}


def zero_shot_eval(student, teacher, test_set, scheme="A", beta2=0.3):
    """Depth saliency without depth labels.

    Scheme A runs the distilled student on depth encodings, B the RGB teacher
    on depth encodings, C the teacher on the RGB images.
    """
    if not test_set.labeled:
        missing = [s.id for s in test_set if s.gt is None]
        raise DataError(f"zero-shot evaluation needs ground truth; missing for {', '.join(missing[:10])}")
    if scheme == "A":
        maps = predict_maps(student, test_set, "depth")
    elif scheme == "B":
        maps = predict_maps(teacher, test_set, "depth")
    elif scheme == "C":
        maps = predict_maps(teacher, test_set, "rgb")
    else:
        raise ConfigError(f"zero-shot scheme must be A, B or C, got {scheme!r}")
    return evaluate(maps, {s.id: s.gt for s in test_set}, beta2)


def depth_init(mode, cfg, teacher=None, student=None, seed=0):
    """Depth network initialisation for the D-(A/B/C) comparison."""
    if mode == "D-A":
        return SaliencyStream.build(cfg.network, seed=seed + 7, scale=cfg.get("train.init_scale", 1.0))
    if mode == "D-B":
        if teacher is None:
            raise ConfigError("D-B initialisation needs a teacher checkpoint (run train-teacher first)")
        return teacher.copy()
    if mode == "D-C":
        if student is None:
            raise ConfigError("D-C initialisation needs a distilled student (run distill first)")
        return student.copy()
    raise ConfigError(f"depth init mode must be one of {DEPTH_INIT_MODES}, got {mode!r}")
