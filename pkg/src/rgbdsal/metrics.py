"""Saliency evaluation: 256-threshold PR curve, F-measure and MAE.

A map value v is positive at threshold t iff round(255 * v) > t, with
round-half-up, so threshold 255 always yields an empty mask and thresholds
0..255 give 256 points. Conventions for empty sets: an empty prediction has
precision 1 if the ground truth is also empty and 0 otherwise; an empty
ground truth has recall 1.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

N_THRESHOLDS = 256
BETA2 = 0.3


def quantize_map(m):
    return np.floor(np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def binarize(m, threshold):
    if not (isinstance(threshold, (int, np.integer)) and 0 <= threshold <= 255):
        raise UsageError(f"threshold must be an integer in 0..255, got {threshold!r}")
    return quantize_map(m) > threshold


def _as_binary(a, what):
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise UsageError(f"{what} must be binary")
    return a.astype(bool)


def precision_recall(pred, gt):
    pred = _as_binary(pred, "prediction")
    gt = _as_binary(gt, "ground truth")
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    tp = np.count_nonzero(pred & gt)
    n_pred = np.count_nonzero(pred)
    n_gt = np.count_nonzero(gt)
    precision = tp / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else 1.0
    return float(precision), float(recall)


def f_measure(precision, recall, beta2=BETA2):
    """(1 + b2) P R / (b2 P + R), 0 where the denominator vanishes. Vectorised."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta2 * p + r
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(den > 0, (1.0 + beta2) * p * r / np.where(den > 0, den, 1.0), 0.0)
    return float(f) if f.ndim == 0 else f


def mae(m, gt):
    m = np.asarray(m, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if m.shape != gt.shape:
        raise UsageError(f"shape mismatch: map {m.shape} vs ground truth {gt.shape}")
    return float(np.mean(np.abs(m - gt)))


def pr_curve(m, gt):
    """Precision and recall at thresholds 0..255 for one map."""
    gt = _as_binary(gt, "ground truth")
    q = quantize_map(m)
    if q.shape != gt.shape:
        raise UsageError(f"shape mismatch: map {q.shape} vs ground truth {gt.shape}")
    pos = np.bincount(q[gt], minlength=256)
    neg = np.bincount(q[~gt], minlength=256)
    n_gt = pos.sum()
    # count strictly above t: total minus cumulative count up to and including t
    tp = n_gt - np.cumsum(pos)
    fp = neg.sum() - np.cumsum(neg)
    n_pred = tp + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(n_pred > 0, tp / np.where(n_pred > 0, n_pred, 1), 1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else np.ones(N_THRESHOLDS)
    return precision.astype(np.float64), np.asarray(recall, dtype=np.float64)


@dataclass
class ImageScore:
    id: str
    precision: np.ndarray
    recall: np.ndarray
    max_f: float
    mean_f: float
    mae: float


@dataclass
class EvalReport:
    images: list
    beta2: float = BETA2
    precision: np.ndarray = field(default=None)
    recall: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.precision is None and self.images:
            self.precision = np.mean([s.precision for s in self.images], axis=0)
            self.recall = np.mean([s.recall for s in self.images], axis=0)

    @property
    def max_f(self):
        return float(np.mean([s.max_f for s in self.images])) if self.images else 0.0

    @property
    def mean_f(self):
        return float(np.mean([s.mean_f for s in self.images])) if self.images else 0.0

    @property
    def mae(self):
        return float(np.mean([s.mae for s in self.images])) if self.images else 0.0

    def summary(self):
        return {
            "images": len(self.images),
            "beta2": self.beta2,
            "max_f": self.max_f,
            "mean_f": self.mean_f,
            "mae": self.mae,
        }

    def write(self, report_path, curve_path=None):
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            json.dumps({"id": s.id, "max_f": s.max_f, "mean_f": s.mean_f, "mae": s.mae}, sort_keys=True)
            for s in self.images
        ]
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        report_path.write_text("\n".join(lines) + "\n")
        if curve_path is not None:
            rows = ["recall\tprecision"]
            if self.images:
                rows += [f"{r:.10f}\t{p:.10f}" for r, p in zip(self.recall, self.precision)]
            Path(curve_path).write_text("\n".join(rows) + "\n")


def score_image(sid, m, gt, beta2=BETA2):
    precision, recall = pr_curve(m, gt)
    f = f_measure(precision, recall, beta2)
    return ImageScore(sid, precision, recall, float(np.max(f)), float(np.mean(f)), mae(np.clip(m, 0, 1), gt))


def evaluate(pred_maps, gt_masks, beta2=BETA2):
    """Score aligned maps; both arguments are id -> array mappings (or equal-length lists)."""
    if not isinstance(pred_maps, dict):
        pred_maps = {str(i): m for i, m in enumerate(pred_maps)}
    if not isinstance(gt_masks, dict):
        gt_masks = {str(i): g for i, g in enumerate(gt_masks)}
    orphans = sorted(set(pred_maps) ^ set(gt_masks))
    if orphans:
        raise DataError(f"ids without a prediction/ground-truth partner: {', '.join(orphans)}")
    images = [score_image(sid, pred_maps[sid], gt_masks[sid], beta2) for sid in sorted(pred_maps)]
    return EvalReport(images=images, beta2=beta2)
