"""Per-point descriptors standing in for a learned backbone.

The default provider computes covariance eigen-features plus a normalized
histogram of neighbor distances. Precomputed features can be read from a
binary feature file instead (see :mod:`salreg.io`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, ParameterError
from .geom import HierarchicalCloud, as_cloud, knn

N_EIGEN_FEATURES = 8


def _neighbor_pairs(pts: np.ndarray, radius: float):
    """Flattened (owner, neighbor) pairs within ``radius``, self included."""
    tree = cKDTree(pts)
    lists = tree.query_ball_point(pts, r=radius)
    counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(pts))
    owners = np.repeat(np.arange(len(pts)), counts)
    nbrs = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=int(counts.sum()))
    return owners, nbrs, counts


def handcrafted_descriptor(cloud, radius: float, dim: int = 32) -> np.ndarray:
    """Eigen-feature + distance-histogram descriptor, one row per point.

    Columns 0-7 are the sum-normalized eigenvalues l1 >= l2 >= l3 of the
    neighborhood covariance, then linearity, planarity, sphericity,
    omnivariance and surface variation. The remaining ``dim - 8`` columns hold
    a histogram of neighbor distances over ``[0, radius]`` that sums to one.
    Points with fewer than 4 neighbors in ``radius`` fall back to their 8
    nearest points for the covariance.
    """
    if dim < N_EIGEN_FEATURES:
        raise ParameterError(f"descriptor dimension must be >= {N_EIGEN_FEATURES}, got {dim}")
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    pts = as_cloud(cloud)
    n = len(pts)
    owners, nbrs, counts = _neighbor_pairs(pts, radius)

    sparse = np.flatnonzero(counts < 4)
    cov_owners, cov_nbrs = owners, nbrs
    if len(sparse):
        keep = counts[owners] >= 4
        k = min(8, n)
        fb = knn(pts[sparse], pts, k)
        cov_owners = np.concatenate([owners[keep], np.repeat(sparse, k)])
        cov_nbrs = np.concatenate([nbrs[keep], fb.reshape(-1)])

    cnt = np.bincount(cov_owners, minlength=n).astype(np.float64)
    q = pts[cov_nbrs]
    mean = np.stack([np.bincount(cov_owners, q[:, c], minlength=n) for c in range(3)], 1) / cnt[:, None]
    centered = q - mean[cov_owners]
    outer = centered[:, :, None] * centered[:, None, :]
    cov = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = np.bincount(cov_owners, outer[:, a, b], minlength=n) / cnt
            cov[:, b, a] = cov[:, a, b]
    lam = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)
    total = lam.sum(1)

    out = np.zeros((n, dim))
    ok = total > 1e-15
    l = lam[ok] / total[ok, None]
    l1, l2, l3 = l[:, 0], l[:, 1], l[:, 2]
    out[ok, 0:3] = l
    out[ok, 3] = (l1 - l2) / l1
    out[ok, 4] = (l2 - l3) / l1
    out[ok, 5] = l3 / l1
    out[ok, 6] = np.cbrt(l1 * l2 * l3)
    out[ok, 7] = l3 / (l1 + l2 + l3)

    bins = dim - N_EIGEN_FEATURES
    if bins:
        not_self = owners != nbrs
        o, j = owners[not_self], nbrs[not_self]
        dist = np.linalg.norm(pts[j] - pts[o], axis=1)
        b = np.minimum((dist / radius * bins).astype(np.int64), bins - 1)
        hist = np.bincount(o * bins + b, minlength=n * bins).reshape(n, bins).astype(np.float64)
        s = hist.sum(1, keepdims=True)
        out[:, N_EIGEN_FEATURES:] = np.divide(hist, s, out=np.zeros_like(hist), where=s > 0)
    return out


def normalize_rows(f) -> tuple[np.ndarray, np.ndarray]:
    """Scale every nonzero row to unit norm.

    Returns the normalized matrix and the indices of all-zero rows, which are
    left untouched.
    """
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ParameterError("feature entries must be finite")
    norms = np.linalg.norm(f, axis=1)
    zero = np.flatnonzero(norms == 0)
    out = f.copy()
    nz = norms > 0
    out[nz] /= norms[nz, None]
    return out, zero


def standardize_columns(f) -> np.ndarray:
    """Shift each channel to zero mean and scale it to unit variance.

    Constant channels are only centered. Handcrafted rows are nearly
    collinear on surfaces (every planar point has almost the same
    eigen-features), so cosine similarity hardly separates them until each
    channel is put on a common scale.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] == 0:
        return f.copy()
    sd = f.std(0)
    return (f - f.mean(0)) / np.where(sd > 1e-12, sd, 1.0)


def pool_groups(dense_feats: np.ndarray, groups) -> np.ndarray:
    """Mean of the dense feature rows in each group (zero row for empty groups)."""
    dense_feats = np.asarray(dense_feats, dtype=np.float64)
    out = np.zeros((len(groups), dense_feats.shape[1]))
    for i, g in enumerate(groups):
        if len(g):
            out[i] = dense_feats[g].mean(0)
    return out


@dataclass
class LevelFeatures:
    dense: np.ndarray
    superpoints: np.ndarray
    raw_dense: np.ndarray | None = None  # dense rows before standardization

    @property
    def unscaled(self) -> np.ndarray:
        return self.dense if self.raw_dense is None else self.raw_dense


def feature_provider(
    kind: str,
    hierarchy: HierarchicalCloud,
    *,
    radius: float = 0.25,
    dim: int = 32,
    dense_path=None,
    superpoint_path=None,
    standardize: bool = False,
) -> LevelFeatures:
    """Dense and superpoint features for one hierarchy.

    ``kind="handcrafted"`` describes the dense level directly.
    ``kind="file"`` reads ``dense_path`` (and optionally ``superpoint_path``).
    Superpoint features default to group-mean pooling of the dense rows.
    With ``standardize`` the dense channels are z-scored per cloud before
    pooling.
    """
    from .io import read_features

    if kind == "handcrafted":
        dense = handcrafted_descriptor(hierarchy.dense, radius, dim)
    elif kind == "file":
        if dense_path is None:
            raise ParameterError("file features need a dense feature path")
        dense = read_features(dense_path)
        if dense.shape[0] != len(hierarchy.dense):
            raise FormatError(
                f"feature file has {dense.shape[0]} rows, cloud has {len(hierarchy.dense)} dense points"
            )
    else:
        raise ParameterError(f"unknown feature provider {kind!r}")
    raw = None
    if standardize:
        raw, dense = dense, standardize_columns(dense)

    if superpoint_path is not None:
        sup = read_features(superpoint_path)
        if sup.shape != (len(hierarchy.superpoints), dense.shape[1]):
            raise FormatError(f"superpoint feature file has shape {sup.shape}")
    else:
        sup = pool_groups(dense, hierarchy.groups)
    return LevelFeatures(dense=dense, superpoints=sup, raw_dense=raw)
