"""Pipeline configuration with JSON round-tripping and sample-count presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ParameterError

# samples -> (superpoint feat, superpoint saliency, dense k, dense feat, dense saliency); None = keep all
PRESETS = {
    250: (256, 128, 1, 500, 250),
    500: (256, 128, 1, 750, 500),
    1000: (256, 192, 2, 1500, 1000),
    2500: (256, 256, 2, 3500, 2500),
    5000: (256, 256, 3, None, 5000),
}


@dataclass
class FeatureConfig:
    kind: str = "handcrafted"
    radius: float = 0.5
    dim: int = 32
    standardize: bool = True
    source_path: str | None = None
    target_path: str | None = None


@dataclass
class SaliencyConfig:
    proportion: float = 0.35
    knn: int = 16


@dataclass
class AttentionConfig:
    enabled: bool = True
    d: int = 32
    heads: int = 4
    n_blocks: int = 3
    distance_scale: float = 0.5
    weight_path: str | None = None
    seed: int = 0


@dataclass
class MatchingConfig:
    preset: int | None = 1000
    superpoint_k_feat: int = 256
    superpoint_k_saliency: int = 192
    dense_k: int = 2
    dense_k_feat: int | None = 1500
    dense_k_saliency: int = 1000
    sinkhorn_iters: int = 100
    slack_value: float = 1.0
    patch_cap: int = 64
    topk_mode: str = "global"
    refine: bool = True

    def apply_preset(self, samples: int) -> None:
        if samples not in PRESETS:
            raise ParameterError(f"unknown preset {samples}; choose from {sorted(PRESETS)}")
        (self.superpoint_k_feat, self.superpoint_k_saliency, self.dense_k,
         self.dense_k_feat, self.dense_k_saliency) = PRESETS[samples]
        self.preset = samples


@dataclass
class EstimatorConfig:
    kind: str = "lgr"
    iterations: int = 50_000
    inlier_tau: float = 0.05
    refine_iters: int = 5


@dataclass
class MetricConfig:
    ir_tau: float = 0.1
    kr_tau: float = 0.1
    pir_tau: float = 0.1
    rmse_tau: float = 0.2
    fmr_threshold: float = 0.05
    gt_radius: float = 0.05


@dataclass
class PipelineConfig:
    base_voxel: float = 0.03
    levels: int = 5
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if not self.base_voxel > 0:
            raise ParameterError("base_voxel must be positive")
        if self.levels < 2:
            raise ParameterError("levels must be >= 2")
        if self.feature.kind not in ("handcrafted", "file"):
            raise ParameterError(f"unknown feature kind {self.feature.kind!r}")
        if not 0 < self.saliency.proportion < 1:
            raise ParameterError("saliency proportion must lie in (0, 1)")
        if self.estimator.kind not in ("svd", "ransac", "lgr"):
            raise ParameterError(f"unknown estimator {self.estimator.kind!r}")
        if self.matching.topk_mode not in ("global", "row"):
            raise ParameterError(f"unknown top-k mode {self.matching.topk_mode!r}")
        m = self.matching
        if m.superpoint_k_saliency > m.superpoint_k_feat:
            raise ParameterError("superpoint k_saliency exceeds k_feat")
        if m.dense_k_feat is not None and m.dense_k_saliency > m.dense_k_feat:
            raise ParameterError("dense k_saliency exceeds k_feat")
        if self.attention.d % self.attention.heads:
            raise ParameterError("attention d must be divisible by heads")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        cfg = cls()
        _merge(cfg, d or {}, "config")
        if "matching" in (d or {}) and "preset" in d["matching"] and d["matching"]["preset"] is not None:
            explicit = {k for k in d["matching"] if k != "preset"}
            saved = {k: getattr(cfg.matching, k) for k in explicit}
            cfg.matching.apply_preset(int(d["matching"]["preset"]))
            for k, v in saved.items():
                setattr(cfg.matching, k, v)
        return cfg.validate()


def _merge(obj, d: dict, where: str) -> None:
    if not isinstance(d, dict):
        raise ParameterError(f"{where} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in d.items():
        if key not in names:
            raise ParameterError(f"unknown key {where}.{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, f"{where}.{key}")
        else:
            setattr(obj, key, value)
