"""End-to-end registration of one cloud pair."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .attention import FedlConfig, fedl_forward, init_weights, load_weights
from .config import PipelineConfig
from .errors import DegenerateInputError, EstimationFailure, ParameterError, RegistrationError
from .features import feature_provider, normalize_rows
from .geom import HierarchicalCloud, RigidTransform, as_cloud, build_hierarchy, knn
from .matching import DenseMatchSet, DenseParams, SuperpointMatchSet, dense_matches, extract_keypoints, superpoint_matches
from .pose import PoseResult, lgr, ransac, weighted_svd
from .saliency import Segmentation, saliency_scores, segment_by_saliency, superpoint_saliency


@dataclass
class PipelineResult:
    config: PipelineConfig
    hier_p: HierarchicalCloud
    hier_q: HierarchicalCloud
    dense_saliency_p: np.ndarray
    dense_saliency_q: np.ndarray
    superpoint_saliency_p: np.ndarray
    superpoint_saliency_q: np.ndarray
    segmentation_p: Segmentation
    segmentation_q: Segmentation
    coarse: SuperpointMatchSet
    dense: DenseMatchSet
    keypoints_p: np.ndarray
    keypoints_q: np.ndarray
    pose: PoseResult
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def transform(self) -> RigidTransform:
        if not self.pose.success:
            raise EstimationFailure(f"[pose] {self.pose.message}")
        return self.pose.transform

    def transform_record(self) -> dict:
        rec = self.transform.to_dict()
        rec["estimator"] = self.config.estimator.kind
        rec["inliers"] = int(len(self.pose.inliers))
        return rec

    def report(self) -> dict:
        """JSON-ready summary. Timings are excluded so reports are reproducible byte for byte."""
        m = self.config.matching
        return {
            "transform": self.transform_record() if self.pose.success else None,
            "success": bool(self.pose.success),
            "counts": {
                "dense_points": [len(self.hier_p.dense), len(self.hier_q.dense)],
                "superpoints": [len(self.hier_p.superpoints), len(self.hier_q.superpoints)],
                "superpoint_matches": len(self.coarse),
                "dense_matches": len(self.dense),
                "keypoints": [len(self.keypoints_p), len(self.keypoints_q)],
            },
            "matching": {
                "preset": m.preset,
                "superpoint": {"feat": m.superpoint_k_feat, "saliency": m.superpoint_k_saliency},
                "dense": {"k": m.dense_k, "feat": "All" if m.dense_k_feat is None else m.dense_k_feat,
                          "saliency": m.dense_k_saliency},
                "refine": m.refine,
            },
            "metrics": self.metrics,
        }


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except RegistrationError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ParameterError(f"[{name}] {exc}") from exc
    finally:
        timings[name] = time.perf_counter() - t0


def _weights(cfg: PipelineConfig):
    a = cfg.attention
    fcfg = FedlConfig(d=a.d, heads=a.heads, n_blocks=a.n_blocks, proportion=cfg.saliency.proportion,
                      distance_scale=a.distance_scale)
    if a.weight_path:
        w = load_weights(a.weight_path)
        return w, w.cfg
    return init_weights(fcfg, a.seed), fcfg


def _neighbors(points: np.ndarray, k: int) -> np.ndarray:
    return knn(points, points, min(k, len(points)))


def dense_params(cfg: PipelineConfig) -> DenseParams:
    m = cfg.matching
    return DenseParams(k=m.dense_k, k_feat=m.dense_k_feat, k_saliency=m.dense_k_saliency,
                       sinkhorn_iters=m.sinkhorn_iters, slack_value=m.slack_value, patch_cap=m.patch_cap)


def estimate_pose(cfg: PipelineConfig, hier_p, hier_q, dense: DenseMatchSet) -> PoseResult:
    e = cfg.estimator
    src = hier_p.dense[dense.src]
    tgt = hier_q.dense[dense.tgt]
    if e.kind == "svd":
        try:
            t = weighted_svd(src, tgt, dense.confidence)
        except (DegenerateInputError, ParameterError) as exc:
            return PoseResult(None, np.zeros(0, np.int64), False, str(exc))
        return PoseResult(t, np.arange(len(src)), True)
    if e.kind == "ransac":
        return ransac(src, tgt, dense.confidence, e.iterations, e.inlier_tau, cfg.seed)
    return lgr(dense.local, hier_p.dense, hier_q.dense, dense.src, dense.tgt, dense.confidence,
               e.inlier_tau, e.refine_iters)


def evaluate(cfg: PipelineConfig, hier_p, hier_q, coarse_src, coarse_tgt, dense_src, dense_tgt,
             est: RigidTransform | None, gt: RigidTransform) -> dict:
    """Metric report for one pair; shared by the pipeline and the ``eval`` command."""
    mc = cfg.metrics
    ir = M.inlier_ratio(dense_src, dense_tgt, hier_p.dense, hier_q.dense, gt, mc.ir_tau)
    out = {"ir": ir, "fmr": float(ir > mc.fmr_threshold)}
    kp, kq = extract_keypoints(_Idx(dense_src, dense_tgt), hier_p.dense, hier_q.dense)
    out["kr"] = M.keypoint_repeatability(kp, kq, gt, mc.kr_tau) if len(kp) else 0.0
    out["pir"] = (M.patch_inlier_ratio(coarse_src, coarse_tgt, hier_p, hier_q, gt, mc.pir_tau)
                  if len(coarse_src) else 0.0)
    if est is None:
        out.update(rre_deg=None, rte=None, rmse=None, rr=0.0)
        return out
    i, j = M.gt_correspondences(hier_p.levels[0], hier_q.levels[0], gt, mc.gt_radius)
    rmse = M.rmse(est, hier_p.levels[0][i], hier_q.levels[0][j])
    out["rmse"] = rmse
    out["rr"] = float(rmse < mc.rmse_tau)
    out["rre_deg"] = float(np.degrees(M.rre(est.rotation, gt.rotation)))
    out["rte"] = M.rte(est.translation, gt.translation)
    return out


@dataclass
class _Idx:
    src: np.ndarray
    tgt: np.ndarray


def run_pipeline(cfg: PipelineConfig, source, target, gt: RigidTransform | None = None) -> PipelineResult:
    cfg.validate()
    t: dict = {}
    with _stage("hierarchy", t):
        src = as_cloud(source)
        tgt = as_cloud(target)
        hp = build_hierarchy(src, cfg.base_voxel, cfg.levels)
        hq = build_hierarchy(tgt, cfg.base_voxel, cfg.levels)
    with _stage("features", t):
        fc = cfg.feature
        lf_p = feature_provider(fc.kind, hp, radius=fc.radius, dim=fc.dim, dense_path=fc.source_path,
                              standardize=fc.standardize)
        lf_q = feature_provider(fc.kind, hq, radius=fc.radius, dim=fc.dim, dense_path=fc.target_path,
                              standardize=fc.standardize)
    with _stage("segmentation", t):
        k = cfg.saliency.knn
        seg_p = segment_by_saliency(saliency_scores(lf_p.superpoints, _neighbors(hp.superpoints, k)),
                                    cfg.saliency.proportion)
        seg_q = segment_by_saliency(saliency_scores(lf_q.superpoints, _neighbors(hq.superpoints, k)),
                                    cfg.saliency.proportion)
    sup_p, sup_q = lf_p.superpoints, lf_q.superpoints
    if cfg.attention.enabled:
        with _stage("attention", t):
            w, fcfg = _weights(cfg)
            if fcfg.d != sup_p.shape[1]:
                raise ParameterError(f"[attention] feature dim {sup_p.shape[1]} != attention d {fcfg.d}")
            sup_p, sup_q = fedl_forward(sup_p, sup_q, hp.superpoints, hq.superpoints, seg_p, seg_q, w, fcfg)
    with _stage("saliency", t):
        k = cfg.saliency.knn
        ds_p = saliency_scores(lf_p.dense, _neighbors(hp.dense, k))
        ds_q = saliency_scores(lf_q.dense, _neighbors(hq.dense, k))
        ss_p = superpoint_saliency(ds_p, hp)
        ss_q = superpoint_saliency(ds_q, hq)
    m = cfg.matching
    with _stage("superpoint_matching", t):
        np_, _ = normalize_rows(sup_p)
        nq_, _ = normalize_rows(sup_q)
        coarse = superpoint_matches(np_, nq_, ss_p, ss_q, m.superpoint_k_feat, m.superpoint_k_saliency,
                                    refine=m.refine, mode=m.topk_mode)
    with _stage("dense_matching", t):
        dp, _ = normalize_rows(lf_p.dense)
        dq, _ = normalize_rows(lf_q.dense)
        dense = dense_matches(coarse, hp, hq, dp, dq, ds_p, ds_q, dense_params(cfg),
                              refine=m.refine)
        kp, kq = extract_keypoints(dense, hp.dense, hq.dense)
    with _stage("pose", t):
        pose = estimate_pose(cfg, hp, hq, dense)
    result = PipelineResult(cfg, hp, hq, ds_p, ds_q, ss_p, ss_q, seg_p, seg_q, coarse, dense, kp, kq, pose,
                            timings=t)
    if gt is not None:
        with _stage("metrics", t):
            result.metrics = evaluate(cfg, hp, hq, coarse.src, coarse.tgt, dense.src, dense.tgt,
                                      pose.transform if pose.success else None, gt)
    return result
