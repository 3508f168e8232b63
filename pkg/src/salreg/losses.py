"""Forward evaluation of the coarse and fine training objectives.

No autograd here: :func:`numeric_gradient` supplies central-difference
gradients for checking descent behaviour.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

CLAMP = 1e-12


@dataclass
class Anchor:
    index: int
    positives: np.ndarray
    overlaps: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.int64).reshape(-1)
        self.overlaps = np.asarray(self.overlaps, dtype=np.float64).reshape(-1)
        self.negatives = np.asarray(self.negatives, dtype=np.int64).reshape(-1)
        if len(self.positives) != len(self.overlaps):
            raise ParameterError("one overlap ratio per positive is required")
        if np.any((self.overlaps <= 0) | (self.overlaps > 1)):
            raise ParameterError("overlap ratios must lie in (0, 1]")
        if np.intersect1d(self.positives, self.negatives).size:
            raise ParameterError("positive and negative sets must be disjoint")


def _check_unit(f: np.ndarray, tol: float = 1e-6):
    if np.any(np.abs(np.linalg.norm(f, axis=1) - 1.0) > tol):
        raise ParameterError("circle loss expects unit-normalized feature rows")


def circle_loss_overlap_aware(f_p, f_q, anchors, delta_p: float = 0.1, delta_n: float = 1.4,
                              gamma: float = 24.0, overlap_exponent: float = 0.5) -> float:
    """Mean over anchors of the overlap-weighted circle loss on feature distances."""
    f_p = np.asarray(f_p, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    _check_unit(f_p)
    _check_unit(f_q)
    if len(anchors) == 0:
        raise ParameterError("circle loss needs at least one anchor")
    total = 0.0
    for a in anchors:
        if len(a.positives) == 0 or len(a.negatives) == 0:
            continue
        d_pos = np.linalg.norm(f_q[a.positives] - f_p[a.index], axis=1)
        d_neg = np.linalg.norm(f_q[a.negatives] - f_p[a.index], axis=1)
        w_pos = np.maximum(0.0, d_pos - delta_p)
        w_neg = np.maximum(0.0, delta_n - d_neg)
        lam = a.overlaps ** overlap_exponent
        log_pos = np.log(lam) + gamma * w_pos * (d_pos - delta_p)
        log_neg = gamma * w_neg * (delta_n - d_neg)
        lse = np.logaddexp.reduce(log_pos) + np.logaddexp.reduce(log_neg)
        total += float(np.logaddexp(0.0, lse))
    return total / len(anchors)


def nll_matching_loss(confidence, gt_pairs, unmatched_rows=(), unmatched_cols=()) -> float:
    """Negative log-likelihood of the supervised cells of a slack-augmented plan."""
    z = np.asarray(confidence, dtype=np.float64)
    pairs = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    rows = np.asarray(unmatched_rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(unmatched_cols, dtype=np.int64).reshape(-1)
    a, b = z.shape[0] - 1, z.shape[1] - 1
    if len(pairs) and (pairs[:, 0].max() >= a or pairs[:, 1].max() >= b or pairs.min() < 0):
        raise ParameterError("ground-truth pair index out of range")
    cells = np.concatenate([
        z[pairs[:, 0], pairs[:, 1]],
        z[rows, np.full(len(rows), b)],
        z[np.full(len(cols), a), cols],
    ])
    if len(cells) == 0:
        raise ParameterError("no supervised cells")
    if np.any(cells <= 0):
        warnings.warn("zero confidence at a supervised cell; clamped", RuntimeWarning, stacklevel=2)
    return float(-np.log(np.maximum(cells, CLAMP)).sum() / len(cells))


def total_loss(coarse: float, fine: float) -> float:
    return coarse + fine


def numeric_gradient(loss_fn, params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not h > 0:
        raise ParameterError("step must be positive")
    x = np.array(params, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for i in range(len(x)):
        orig = x[i]
        x[i] = orig + h
        up = loss_fn(x.copy())
        x[i] = orig - h
        down = loss_fn(x.copy())
        x[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise ParameterError(f"loss is not finite around coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad
