"""Saliency scores from feature distinctiveness and salient/non-salient splits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .geom import HierarchicalCloud


@dataclass(frozen=True)
class Segmentation:
    salient: np.ndarray
    non_salient: np.ndarray
    proportion: float


def saliency_scores(features, neighbors) -> np.ndarray:
    """Per-point score combining local and channel distinctiveness.

    For channel c of point i, the local term is
    ``softplus(F[i, c] - mean_j F[j, c])`` over the neighbors j of i and the
    channel term is ``|F[i, c]| / max_c' |F[i, c']|``. The score is the
    maximum over channels of their product.
    """
    f = np.asarray(features, dtype=np.float64)
    nb = np.asarray(neighbors)
    if f.ndim != 2:
        raise ParameterError("features must be a 2-D matrix")
    if nb.ndim != 2 or nb.shape[0] != f.shape[0] or nb.shape[1] == 0:
        raise ParameterError("every point needs a non-empty neighbor list")
    if not np.all(np.isfinite(f)):
        raise ParameterError("features must be finite")
    local = np.logaddexp(0.0, f - f[nb].mean(1))
    mag = np.abs(f)
    channel = mag / (mag.max(1, keepdims=True) + 1e-12)
    return (local * channel).max(1)


def n_salient(n: int, proportion: float) -> int:
    # guards against n * 0.35 landing just under an integer in binary floating point
    return int(math.floor(n * proportion + 1e-9))


def segment_by_saliency(scores, proportion: float = 0.35) -> Segmentation:
    """Top ``floor(n * proportion)`` scores become salient; ties favor lower indices."""
    if not 0.0 < proportion < 1.0:
        raise ParameterError(f"proportion must lie in (0, 1), got {proportion}")
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if n < 2:
        raise ParameterError("segmentation needs at least two points")
    order = np.lexsort((np.arange(n), -s))
    k = n_salient(n, proportion)
    return Segmentation(
        salient=np.sort(order[:k]),
        non_salient=np.sort(order[k:]),
        proportion=proportion,
    )


def superpoint_saliency(dense_scores, hierarchy: HierarchicalCloud) -> np.ndarray:
    s = np.asarray(dense_scores, dtype=np.float64)
    out = np.zeros(len(hierarchy.groups))
    for i, g in enumerate(hierarchy.groups):
        if len(g):
            out[i] = s[g].mean()
    return out


def match_saliency(i, j, s_src, s_tgt):
    """Sum of endpoint saliencies; ``i`` and ``j`` may be scalars or index arrays."""
    s_src = np.asarray(s_src, dtype=np.float64)
    s_tgt = np.asarray(s_tgt, dtype=np.float64)
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any((i < 0) | (i >= len(s_src))) or np.any((j < 0) | (j >= len(s_tgt))):
        raise ParameterError("match index out of range")
    out = s_src[i] + s_tgt[j]
    return float(out) if out.ndim == 0 else out
