"""Mask-space agreement metrics: Dice, IoU, generalized energy distance.

The distance inside the energy statistic is the Jaccard distance
d = 1 - IoU. Expectations are all-pairs means over the finite uniform
supports, self-pairs included, so identical multisets score exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import DimensionError, UsageError
from .heads import MaskEnsemble


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def dice(a, b) -> float:
    """2|A.B| / (|A|+|B|); both-empty masks score 1 by convention."""
    a, b = _check_pair(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def iou(a, b) -> float:
    """|A.B| / |AuB|; both-empty masks score 1 by convention."""
    a, b = _check_pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


def jaccard_distance(a, b) -> float:
    return 1.0 - iou(a, b)


@dataclass
class GedReport:
    d_cross: float    # E[d(S, Y)]
    d_pred: float     # E[d(S, S')]
    d_raters: float   # E[d(Y, Y')]
    ged: float        # D^2 = 2 d_cross - d_pred - d_raters
    n_samples: int
    n_raters: int

    def to_dict(self) -> dict:
        return asdict(self)


def _flat_bool(ensemble: MaskEnsemble) -> np.ndarray:
    return np.stack([m.reshape(-1).astype(bool) for m in ensemble.masks])


def _pairwise_mean_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Jaccard distance over all (i, j) pairs of two stacked mask sets."""
    inter = (a.astype(np.float64) @ b.T.astype(np.float64))
    sa = a.sum(axis=1, dtype=np.float64)[:, None]
    sb = b.sum(axis=1, dtype=np.float64)[None, :]
    union = sa + sb - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        j = np.where(union > 0, inter / union, 1.0)
    return float(np.mean(1.0 - j))


def ged(samples: MaskEnsemble, raters: MaskEnsemble) -> GedReport:
    """Generalized energy distance D^2 between two mask distributions.

    All expectations are exact all-pairs means (cross over T*R pairs,
    within-set over all T^2 / R^2 ordered pairs including self-pairs);
    this makes D^2 vanish for identical multisets.
    """
    if len(samples) < 2 or len(raters) < 2:
        raise UsageError("ged needs at least 2 masks in each ensemble")
    if samples.masks[0].shape != raters.masks[0].shape:
        raise DimensionError("sample and rater masks must share one shape")
    s = _flat_bool(samples)
    y = _flat_bool(raters)
    d_cross = _pairwise_mean_distance(s, y)
    d_pred = _pairwise_mean_distance(s, s)
    d_raters = _pairwise_mean_distance(y, y)
    return GedReport(
        d_cross=d_cross,
        d_pred=d_pred,
        d_raters=d_raters,
        ged=2.0 * d_cross - d_pred - d_raters,
        n_samples=len(samples),
        n_raters=len(raters),
    )


@dataclass
class DiceSummary:
    values: list
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {"values": list(self.values), "mean": self.mean, "std": self.std}


def dice_distribution(masks: MaskEnsemble, reference) -> DiceSummary:
    """Dice of each ensemble mask against a reference; (n-1) std, n=1 -> 0."""
    ref = np.asarray(reference)
    values = [dice(m, ref) for m in masks.masks]
    arr = np.asarray(values)
    std = float(arr.std(ddof=1)) if len(values) > 1 else 0.0
    return DiceSummary(values=values, mean=float(arr.mean()), std=std)
