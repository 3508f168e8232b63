"""Coarse-to-fine correspondence search with saliency-based refinement.

Superpoints are matched on a dual-normalized Gaussian correlation, then each
superpoint match is expanded into dense matches with an optimal-transport
(Sinkhorn with slack) assignment between the two patches.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .geom import HierarchicalCloud
from .saliency import match_saliency


@dataclass
class SuperpointMatchSet:
    src: np.ndarray
    tgt: np.ndarray
    score: np.ndarray
    saliency: np.ndarray

    def __len__(self):
        return len(self.src)

    def rows(self):
        return list(zip(self.src.tolist(), self.tgt.tolist(), self.score.tolist(), self.saliency.tolist()))


@dataclass
class DenseMatchSet:
    """Dense matches plus the per-patch local matches they were drawn from.

    ``local[l]`` holds ``(src, tgt, confidence)`` arrays produced by coarse
    match ``l`` before any global filtering.
    """

    src: np.ndarray
    tgt: np.ndarray
    confidence: np.ndarray
    saliency: np.ndarray
    local: list = field(default_factory=list)

    def __len__(self):
        return len(self.src)

    def rows(self):
        return list(zip(self.src.tolist(), self.tgt.tolist(), self.confidence.tolist(), self.saliency.tolist()))


@dataclass(frozen=True)
class DenseParams:
    k: int = 1
    k_feat: int | None = 500
    k_saliency: int = 250
    sinkhorn_iters: int = 100
    slack_value: float = 1.0
    patch_cap: int = 64


def gaussian_correlation(f_p, f_q) -> np.ndarray:
    f_p = np.asarray(f_p, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    if f_p.shape[1] != f_q.shape[1]:
        raise ParameterError("feature dimensions differ")
    d2 = ((f_p[:, None, :] - f_q[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2)


def dual_normalize(s) -> np.ndarray:
    """Product of the row-normalized and column-normalized matrix."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise ParameterError("dual normalization needs non-negative entries")
    rows = s.sum(1, keepdims=True)
    cols = s.sum(0, keepdims=True)
    if np.any(rows <= 0) or np.any(cols <= 0):
        raise DegenerateInputError("dual normalization needs positive row and column sums")
    return (s / rows) * (s / cols)


def _select(primary, secondary, i, j, k):
    """Indices of the top-``k`` entries by (primary desc, secondary desc, i, j)."""
    order = np.lexsort((j, i, -secondary, -primary))
    return order[:k]


def superpoint_matches(f_p, f_q, s_p, s_q, k_feat: int = 256, k_saliency: int = 128,
                       refine: bool = True, mode: str = "global") -> SuperpointMatchSet:
    """Top ``k_feat`` correlation entries, then the ``k_saliency`` most salient of them.

    With ``refine=False`` the second stage ranks by correlation instead of
    saliency, which is the confidence-only baseline. ``mode="row"`` spreads
    the first stage across rows instead of taking a global top-k.
    """
    if k_saliency > k_feat:
        raise ParameterError("k_saliency must not exceed k_feat")
    score = dual_normalize(gaussian_correlation(f_p, f_q))
    n, m = score.shape
    if k_feat > n * m:
        warnings.warn(f"k_feat={k_feat} exceeds {n * m} candidates; clamped", RuntimeWarning, stacklevel=2)
        k_feat = n * m
    ii, jj = np.divmod(np.arange(n * m), m)
    flat = score.reshape(-1)
    if mode == "global":
        sel = np.lexsort((jj, ii, -flat))[:k_feat]
    elif mode == "row":
        per_row = math.ceil(k_feat / n)
        row_rank = np.argsort(np.argsort(-score, axis=1, kind="stable"), axis=1, kind="stable").reshape(-1)
        cand = np.flatnonzero(row_rank < per_row)
        sel = cand[np.lexsort((jj[cand], ii[cand], -flat[cand]))][:k_feat]
    else:
        raise ParameterError(f"unknown top-k mode {mode!r}")
    i, j, sc = ii[sel], jj[sel], flat[sel]
    sal = match_saliency(i, j, s_p, s_q) if len(sel) else np.zeros(0)
    primary = sal if refine else sc
    keep = _select(primary, sc, i, j, k_saliency)
    return SuperpointMatchSet(i[keep], j[keep], sc[keep], np.asarray(sal)[keep])


def group_features(hier: HierarchicalCloud, dense_feats, cap: int = 64):
    """Per-superpoint dense index lists (ascending), capped to the ``cap`` points nearest the superpoint."""
    if cap < 1:
        raise ParameterError("patch cap must be >= 1")
    dense_feats = np.asarray(dense_feats, dtype=np.float64)
    idx_groups, feat_groups = [], []
    for s, g in enumerate(hier.groups):
        g = np.asarray(g, dtype=np.int64)
        if len(g) > cap:
            d2 = ((hier.dense[g] - hier.superpoints[s]) ** 2).sum(1)
            g = np.sort(g[np.lexsort((g, d2))[:cap]])
        idx_groups.append(g)
        feat_groups.append(dense_feats[g])
    return idx_groups, feat_groups


def patch_similarity(f_i, f_j, d: int | None = None) -> np.ndarray:
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    d = f_i.shape[1] if d is None else d
    if f_i.shape[1] != d or f_j.shape[1] != d:
        raise ParameterError(f"patch features must have {d} columns")
    return f_i @ f_j.T / math.sqrt(d)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_with_slack(m, slack_value: float = 1.0, iterations: int = 100) -> np.ndarray:
    """Log-domain Sinkhorn over ``m`` augmented with a slack row and column.

    Real rows and columns target unit mass; the slack row carries ``b`` and
    the slack column ``a``. Returns the ``(a+1, b+1)`` transport plan.
    """
    m = np.asarray(m, dtype=np.float64)
    if iterations < 1:
        raise ParameterError("Sinkhorn needs at least one iteration")
    if not (np.all(np.isfinite(m)) and math.isfinite(slack_value)):
        raise ParameterError("Sinkhorn input must be finite")
    a, b = m.shape
    z = np.full((a + 1, b + 1), float(slack_value))
    z[:a, :b] = m
    log_mu = np.zeros(a + 1)
    log_mu[a] = math.log(b) if b else -np.inf
    log_nu = np.zeros(b + 1)
    log_nu[b] = math.log(a) if a else -np.inf
    u = np.zeros(a + 1)
    v = np.zeros(b + 1)
    for _ in range(iterations):
        u = log_mu - _lse(z + v[None, :], axis=1)
        v = log_nu - _lse(z + u[:, None], axis=0)
    return np.exp(z + u[:, None] + v[None, :])


def mutual_topk(conf, k: int) -> np.ndarray:
    """Cells ranking in the top ``k`` of both their row and column, as ``(n, 2)`` pairs.

    Within a row ties go to the lower column index, within a column to the
    lower row index. Pairs are returned in row-major order.
    """
    conf = np.asarray(conf, dtype=np.float64)
    if k < 1:
        raise ParameterError("k must be >= 1")
    if conf.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    row_rank = np.empty(conf.shape, dtype=np.int64)
    np.put_along_axis(row_rank, np.argsort(-conf, axis=1, kind="stable"),
                      np.arange(conf.shape[1])[None, :].repeat(conf.shape[0], 0), axis=1)
    col_rank = np.empty(conf.shape, dtype=np.int64)
    np.put_along_axis(col_rank, np.argsort(-conf, axis=0, kind="stable"),
                      np.arange(conf.shape[0])[:, None].repeat(conf.shape[1], 1), axis=0)
    return np.argwhere((row_rank < k) & (col_rank < k))


def dense_matches(coarse: SuperpointMatchSet, hier_p: HierarchicalCloud, hier_q: HierarchicalCloud,
                  feats_p, feats_q, sal_p, sal_q, params: DenseParams = DenseParams(),
                  refine: bool = True) -> DenseMatchSet:
    """Expand superpoint matches into a saliency-refined dense match set."""
    if len(coarse) == 0:
        raise DegenerateInputError("dense matching needs at least one superpoint match")
    feats_p = np.asarray(feats_p, dtype=np.float64)
    feats_q = np.asarray(feats_q, dtype=np.float64)
    d = feats_p.shape[1]
    groups_p, fgroups_p = group_features(hier_p, feats_p, params.patch_cap)
    groups_q, fgroups_q = group_features(hier_q, feats_q, params.patch_cap)

    local = []
    for i, j in zip(coarse.src.tolist(), coarse.tgt.tolist()):
        gp, gq = groups_p[i], groups_q[j]
        if len(gp) == 0 or len(gq) == 0:
            local.append((np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)))
            continue
        plan = sinkhorn_with_slack(patch_similarity(fgroups_p[i], fgroups_q[j], d),
                                   params.slack_value, params.sinkhorn_iters)
        conf = np.clip(plan[:-1, :-1], 0.0, 1.0)
        pairs = mutual_topk(conf, params.k)
        local.append((gp[pairs[:, 0]], gq[pairs[:, 1]], conf[pairs[:, 0], pairs[:, 1]]))

    src = np.concatenate([x[0] for x in local])
    tgt = np.concatenate([x[1] for x in local])
    cf = np.concatenate([x[2] for x in local])
    # deterministic union: sort by (p, q, -confidence) and keep the first of each pair
    order = np.lexsort((-cf, tgt, src))
    src, tgt, cf = src[order], tgt[order], cf[order]
    first = np.ones(len(src), dtype=bool)
    first[1:] = (src[1:] != src[:-1]) | (tgt[1:] != tgt[:-1])
    src, tgt, cf = src[first], tgt[first], cf[first]

    if params.k_feat is not None:
        keep = np.lexsort((tgt, src, -cf))[: params.k_feat]
        src, tgt, cf = src[keep], tgt[keep], cf[keep]
    sal = match_saliency(src, tgt, sal_p, sal_q) if len(src) else np.zeros(0)
    keep = _select(sal if refine else cf, cf, src, tgt, params.k_saliency)
    return DenseMatchSet(src[keep], tgt[keep], cf[keep], np.asarray(sal)[keep], local)


def extract_keypoints(matches, cloud_p, cloud_q):
    """Matched source and target points, deduplicated in order of first appearance."""
    src = np.asarray(matches.src, dtype=np.int64)
    tgt = np.asarray(matches.tgt, dtype=np.int64)
    _, fp = np.unique(src, return_index=True)
    _, fq = np.unique(tgt, return_index=True)
    kp = np.asarray(cloud_p, dtype=np.float64)[src[np.sort(fp)]] if len(src) else np.zeros((0, 3))
    kq = np.asarray(cloud_q, dtype=np.float64)[tgt[np.sort(fq)]] if len(tgt) else np.zeros((0, 3))
    return kp, kq


__all__ = [
    "DenseMatchSet", "DenseParams", "SuperpointMatchSet", "dense_matches", "dual_normalize",
    "extract_keypoints", "gaussian_correlation", "group_features", "mutual_topk",
    "patch_similarity", "sinkhorn_with_slack", "superpoint_matches",
]
