"""Registration and matching metrics.

Ratios are returned as floats in [0, 1]; rotation errors in radians.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError
from .geom import HierarchicalCloud, RigidTransform, apply_transform, knn

KITTI_PRESET = {"rre_deg": 5.0, "rte": 2.0}


def inlier_ratio(src_idx, tgt_idx, cloud_p, cloud_q, gt: RigidTransform, tau: float = 0.1) -> float:
    src_idx = np.asarray(src_idx, dtype=np.int64)
    if len(src_idx) == 0:
        return 0.0
    p = apply_transform(gt, np.asarray(cloud_p)[src_idx])
    q = np.asarray(cloud_q)[np.asarray(tgt_idx, dtype=np.int64)]
    return float((np.linalg.norm(p - q, axis=1) < tau).mean())


def feature_matching_recall(per_pair_ir, ir_threshold: float = 0.05) -> float:
    ir = np.asarray(per_pair_ir, dtype=np.float64)
    if ir.size == 0:
        raise ParameterError("feature matching recall needs at least one pair")
    return float((ir > ir_threshold).mean())


def gt_correspondences(cloud_p, cloud_q, gt: RigidTransform, radius: float = 0.05):
    """Mutual nearest neighbors under ``gt`` that lie within ``radius``."""
    p = apply_transform(gt, cloud_p)
    q = np.asarray(cloud_q, dtype=np.float64)
    nn_pq, d_pq = knn(p, q, 1, return_distances=True)
    nn_qp = knn(q, p, 1)[:, 0]
    nn_pq, d_pq = nn_pq[:, 0], d_pq[:, 0]
    i = np.flatnonzero((nn_qp[nn_pq] == np.arange(len(p))) & (d_pq < radius))
    return i, nn_pq[i]


def rmse(est: RigidTransform, src, tgt) -> float:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0:
        raise ParameterError("RMSE needs at least one correspondence")
    d = apply_transform(est, src) - np.asarray(tgt, dtype=np.float64).reshape(-1, 3)
    return float(math.sqrt((d * d).sum(1).mean()))


def registration_recall_rmse(est: RigidTransform, src, tgt, rmse_tau: float = 0.2) -> bool:
    """True when ``est`` maps the ground-truth correspondences with RMSE below ``rmse_tau``."""
    return rmse(est, src, tgt) < rmse_tau


def keypoint_repeatability(k_p, k_q, gt: RigidTransform, tau: float = 0.1) -> float:
    """Fraction of source keypoints whose nearest target keypoint under ``gt`` is within ``tau``."""
    k_p = np.asarray(k_p, dtype=np.float64).reshape(-1, 3)
    k_q = np.asarray(k_q, dtype=np.float64).reshape(-1, 3)
    if len(k_p) == 0:
        raise ParameterError("keypoint repeatability needs source keypoints")
    if len(k_q) == 0:
        return 0.0
    _, d = knn(apply_transform(gt, k_p), k_q, 1, return_distances=True)
    return float((d[:, 0] < tau).mean())


def patch_inlier_ratio(coarse_src, coarse_tgt, hier_p: HierarchicalCloud, hier_q: HierarchicalCloud,
                       gt: RigidTransform, tau: float = 0.1) -> float:
    """Fraction of superpoint matches whose patches contain at least one pair closer than ``tau``."""
    coarse_src = np.asarray(coarse_src, dtype=np.int64)
    coarse_tgt = np.asarray(coarse_tgt, dtype=np.int64)
    if len(coarse_src) == 0:
        raise ParameterError("patch inlier ratio needs at least one superpoint match")
    dense_p = apply_transform(gt, hier_p.dense)
    dense_q = hier_q.dense
    hits = 0
    for i, j in zip(coarse_src.tolist(), coarse_tgt.tolist()):
        gp, gq = hier_p.groups[i], hier_q.groups[j]
        if len(gp) == 0 or len(gq) == 0:
            continue
        d = np.linalg.norm(dense_p[gp][:, None, :] - dense_q[gq][None, :, :], axis=-1)
        hits += bool((d < tau).any())
    return hits / len(coarse_src)


def rre(r_est, r_gt) -> float:
    r_est = np.asarray(r_est, dtype=np.float64)
    r_gt = np.asarray(r_gt, dtype=np.float64)
    c = (np.trace(r_gt.T @ r_est) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def rte(t_est, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))
