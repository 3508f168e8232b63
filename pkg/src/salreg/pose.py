"""Rigid pose from weighted 3-D correspondences: Procrustes, RANSAC and LGR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .geom import RigidTransform

# relative singular-value floor below which the cross-covariance counts as rank deficient
_RANK_TOL = 1e-9


@dataclass
class PoseResult:
    """Outcome of a robust estimator. ``transform`` is None when ``success`` is False."""

    transform: RigidTransform | None
    inliers: np.ndarray
    success: bool
    message: str = ""
    inlier_history: list = field(default_factory=list)


def _as_pairs(src, tgt, weights):
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(tgt):
        raise ParameterError("source and target must have the same number of points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(src):
        raise ParameterError("one weight per correspondence is required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ParameterError("weights must be finite and non-negative")
    return src, tgt, w


def _procrustes_batch(src: np.ndarray, tgt: np.ndarray, w: np.ndarray):
    """Batched weighted Procrustes over leading axis. Returns R, t, rank-ok mask."""
    wsum = w.sum(-1, keepdims=True)
    wn = w / np.where(wsum > 0, wsum, 1.0)
    cs = (wn[..., None] * src).sum(-2)
    ct = (wn[..., None] * tgt).sum(-2)
    h = np.swapaxes(w[..., None] * (src - cs[..., None, :]), -1, -2) @ (tgt - ct[..., None, :])
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    det = np.linalg.det(v @ ut)
    fix = np.ones(s.shape)
    fix[..., 2] = np.where(det < 0, -1.0, 1.0)
    r = (v * fix[..., None, :]) @ ut
    t = ct - (r @ cs[..., None])[..., 0]
    ok = (wsum[..., 0] > 0) & (s[..., 0] > 1e-300) & (s[..., 1] > _RANK_TOL * s[..., 0])
    return r, t, ok


def weighted_svd(src, tgt, weights=None) -> RigidTransform:
    """Closed-form minimizer of ``sum w_i |R p_i + t - q_i|^2``."""
    src, tgt, w = _as_pairs(src, tgt, weights)
    if len(src) < 3:
        raise DegenerateInputError("at least three correspondences are required")
    if w.sum() <= 0:
        raise ParameterError("weights sum to zero")
    r, t, ok = _procrustes_batch(src, tgt, w)
    if not ok:
        raise DegenerateInputError("correspondences are collinear or otherwise rank deficient")
    return RigidTransform(r, t)


def residuals(t: RigidTransform, src, tgt) -> np.ndarray:
    return np.linalg.norm(np.asarray(src) @ t.rotation.T + t.translation - np.asarray(tgt), axis=1)


def _sample_triplets(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """``size`` draws of three distinct indices from ``range(n)``."""
    a = rng.integers(0, n, size)
    b = rng.integers(0, n - 1, size)
    b += b >= a
    c = rng.integers(0, n - 2, size)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c += c >= lo
    c += c >= hi
    return np.stack([a, b, c], 1)


def ransac(src, tgt, weights=None, iterations: int = 50_000, inlier_tau: float = 0.05,
           seed: int = 0, chunk: int = 512) -> PoseResult:
    """Minimal-sample RANSAC with a weighted Procrustes refit on the best inlier set."""
    src, tgt, w = _as_pairs(src, tgt, weights)
    n = len(src)
    if n < 3:
        raise DegenerateInputError("RANSAC needs at least three correspondences")
    if not inlier_tau > 0:
        raise ParameterError("inlier threshold must be positive")
    tau2 = inlier_tau * inlier_tau
    base = (src * src).sum(1) + (tgt * tgt).sum(1)
    outer = (tgt[:, :, None] * src[:, None, :]).reshape(-1, 9).T
    rng = np.random.default_rng(seed)
    samples = _sample_triplets(rng, n, iterations)
    best_count, best_mask = -1, None
    for s in range(0, iterations, chunk):
        tri = samples[s : s + chunk]
        r, t, ok = _procrustes_batch(src[tri], tgt[tri], w[tri])
        # |R p + t - q|^2 expanded so the batch reduces to three small matrix products
        d2 = (base[None, :] + (t * t).sum(1)[:, None] - 2.0 * t @ tgt.T
              + 2.0 * np.einsum("bji,bj->bi", r, t) @ src.T - 2.0 * r.reshape(-1, 9) @ outer)
        inl = d2 < tau2
        counts = np.where(ok, inl.sum(1), -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_mask = int(counts[k]), inl[k]
    if best_count < 3:
        return PoseResult(None, np.zeros(0, np.int64), False, "no model reached three inliers")
    inliers = np.flatnonzero(best_mask)
    try:
        final = weighted_svd(src[inliers], tgt[inliers], w[inliers])
    except (DegenerateInputError, ParameterError) as exc:
        return PoseResult(None, inliers, False, f"refit failed: {exc}")
    return PoseResult(final, inliers, True)


def lgr(coarse_local, src_points, tgt_points, dense_src, dense_tgt, dense_weights=None,
        inlier_tau: float = 0.05, refine_iters: int = 5) -> PoseResult:
    """Local-to-global registration.

    ``coarse_local`` is a sequence of ``(src_idx, tgt_idx, confidence)`` per
    superpoint match. Each one with at least three matches yields a candidate
    pose; the candidate with the most global inliers among the dense matches
    wins and is refit on its inliers ``refine_iters`` times.
    """
    sp = np.asarray(src_points, dtype=np.float64)
    tp = np.asarray(tgt_points, dtype=np.float64)
    g_src, g_tgt, g_w = _as_pairs(sp[np.asarray(dense_src, np.int64)], tp[np.asarray(dense_tgt, np.int64)],
                                  dense_weights)
    best, best_count = None, -1
    for li, lj, lc in coarse_local:
        if len(li) < 3:
            continue
        lw = np.asarray(lc, dtype=np.float64)
        if lw.sum() <= 0:
            continue
        r, t, ok = _procrustes_batch(sp[li], tp[lj], lw)
        if not ok:
            continue
        cand = RigidTransform(r, t)
        count = int((residuals(cand, g_src, g_tgt) < inlier_tau).sum())
        if count > best_count:
            best, best_count = cand, count
    if best is None:
        return PoseResult(None, np.zeros(0, np.int64), False, "every local candidate was degenerate")

    history = []
    for _ in range(refine_iters):
        inliers = np.flatnonzero(residuals(best, g_src, g_tgt) < inlier_tau)
        history.append(len(inliers))
        if len(inliers) < 3:
            break
        try:
            best = weighted_svd(g_src[inliers], g_tgt[inliers], g_w[inliers])
        except (DegenerateInputError, ParameterError):
            break
    inliers = np.flatnonzero(residuals(best, g_src, g_tgt) < inlier_tau)
    history.append(len(inliers))
    return PoseResult(best, inliers, True, inlier_history=history)
