"""Point clouds, rigid transforms, voxel hierarchies and exact neighbor queries.

A point cloud is a plain ``(n, 3)`` float64 array. Nothing in this module
reorders its input; every function returns new arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, ParameterError

_CHUNK = 1024
_TREE_MIN = 512  # below this many base points brute force is as fast
_TREE_MARGIN = 8


def as_cloud(points) -> np.ndarray:
    """Validate and return ``points`` as a contiguous ``(n, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ParameterError(f"expected an (n, 3) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("point coordinates must be finite")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, det +1) followed by a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ParameterError("transform entries must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ParameterError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return apply_transform(self, points)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        try:
            rot = np.asarray(d["rotation"], dtype=np.float64)
            trans = np.asarray(d["translation"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"malformed transform record: {exc}") from exc
        if rot.size != 9 or trans.size != 3:
            raise ParameterError("transform needs 9 rotation and 3 translation values")
        return cls(rot.reshape(3, 3), trans)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly over SO(3) (unit quaternion from a Gaussian)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    # polish to machine orthonormality so RigidTransform validation never trips
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def apply_transform(t: RigidTransform, points) -> np.ndarray:
    pts = as_cloud(points) if np.asarray(points).size else np.zeros((0, 3))
    return pts @ t.rotation.T + t.translation


def compose(t2: RigidTransform, t1: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``t1`` first and then ``t2``."""
    return RigidTransform(t2.rotation @ t1.rotation, t2.rotation @ t1.translation + t2.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def grid_subsample(cloud, voxel: float) -> np.ndarray:
    """Replace the points of each occupied voxel by their barycenter.

    Output rows follow ascending voxel keys compared as ``(z, y, x)``.
    """
    if not voxel > 0:
        raise ParameterError(f"voxel size must be positive, got {voxel}")
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise DegenerateInputError("cannot subsample an empty cloud")
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys[:, ::-1], axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    out = np.empty((m, 3))
    for c in range(3):
        # bincount sums in input order, so the reduction is deterministic
        out[:, c] = np.bincount(inverse, weights=pts[:, c], minlength=m)
    return out / counts[:, None]


def knn(query, base, k: int, return_distances: bool = False):
    """Exact k nearest neighbors of each query point in ``base``.

    Ties are broken by the lower base index. Returns an ``(n_query, k)``
    index array, plus matching Euclidean distances on request.
    """
    q = as_cloud(query)
    b = as_cloud(base)
    k = int(k)
    if k < 1 or k > len(b):
        raise ParameterError(f"k must lie in [1, {len(b)}], got {k}")
    idx = np.empty((len(q), k), dtype=np.int64)
    dist = np.empty((len(q), k))
    rows = np.arange(len(q))
    if len(b) > _TREE_MIN and k + _TREE_MARGIN < len(b):
        rows = _knn_tree(q, b, k, idx, dist)
    for start in range(0, len(rows), _CHUNK):
        sel = rows[start : start + _CHUNK]
        # explicit differences; the expanded-square form can reorder near-ties
        d2 = _exact_rows(q[sel], b)
        if k < len(b):
            kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
            masked = np.where(d2 <= kth, d2, np.inf)
        else:
            masked = d2
        order = np.argsort(masked, axis=1, kind="stable")[:, :k]
        idx[sel] = order
        dist[sel] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    if return_distances:
        return idx, dist
    return idx


def _knn_tree(q, b, k, idx, dist) -> np.ndarray:
    """Fill rows whose answer a KD-tree shortlist settles; return the rest.

    The tree proposes ``k + margin`` candidates, which are re-ranked on exact
    squared distances with the index as tie-break. A row is settled when its
    k-th distance is strictly below every point left off the shortlist.
    """
    m = k + _TREE_MARGIN
    _, cand = cKDTree(b).query(q, k=m)
    d2 = ((q[:, None, :] - b[cand]) ** 2).sum(-1)
    order = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(cand, order, axis=1)
    top_d2 = np.take_along_axis(d2, order, axis=1)
    settled = top_d2[:, -1] < d2.max(1) * (1.0 - 1e-9)
    idx[settled] = top[settled]
    dist[settled] = np.sqrt(top_d2[settled])
    return np.flatnonzero(~settled)


def _exact_rows(qc: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((len(qc), len(b)))
    step = max(1, 1_000_000 // max(len(b), 1))
    for s in range(0, len(qc), step):
        out[s : s + step] = ((qc[s : s + step, None, :] - b[None, :, :]) ** 2).sum(-1)
    return out


@dataclass
class HierarchicalCloud:
    """Multi-resolution view of one cloud.

    ``levels[0]`` is the raw input, ``levels[1]`` the dense points and
    ``levels[-1]`` the superpoints. ``assignments[i]`` is the superpoint that
    owns dense point ``i``; ``groups[j]`` lists the dense points owned by
    superpoint ``j`` in ascending order.
    """

    levels: list
    assignments: np.ndarray
    groups: list = field(default_factory=list)

    @property
    def dense(self) -> np.ndarray:
        return self.levels[1]

    @property
    def superpoints(self) -> np.ndarray:
        return self.levels[-1]


def assign_to_nodes(dense, nodes) -> tuple[np.ndarray, list]:
    """Point-to-node assignment: every dense point joins its nearest node."""
    assignments = knn(dense, nodes, 1)[:, 0]
    order = np.argsort(assignments, kind="stable")
    bounds = np.searchsorted(assignments[order], np.arange(len(nodes) + 1))
    groups = [order[bounds[i] : bounds[i + 1]] for i in range(len(nodes))]
    return assignments, groups


def build_hierarchy(cloud, base_voxel: float, levels: int = 3) -> HierarchicalCloud:
    """Subsample ``cloud`` at voxel sizes ``base_voxel * 2**(k-1)`` for k >= 1."""
    if int(levels) < 2:
        raise ParameterError(f"a hierarchy needs at least 2 levels, got {levels}")
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise DegenerateInputError("cannot build a hierarchy from an empty cloud")
    out = [pts.copy()]
    for k in range(1, int(levels)):
        lvl = grid_subsample(pts, base_voxel * 2.0 ** (k - 1))
        if len(lvl) == 0:
            raise DegenerateInputError(f"hierarchy level {k} is empty")
        out.append(lvl)
    assignments, groups = assign_to_nodes(out[1], out[-1])
    return HierarchicalCloud(levels=out, assignments=assignments, groups=groups)
