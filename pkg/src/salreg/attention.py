"""Forward-only feature enhancement attention.

One block runs geometric self-attention on each cloud, lets non-salient
superpoints attend to salient ones of the same cloud, then exchanges
information across the two clouds with cross-attention. Weights are shared
between the two clouds and between both cross directions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError
from .saliency import Segmentation

KINDS = ("self", "intra", "cross")
N_DIST_FREQ = 8
LN_EPS = 1e-5


@dataclass(frozen=True)
class FedlConfig:
    d: int = 32
    heads: int = 4
    n_blocks: int = 3
    proportion: float = 0.35
    distance_scale: float = 0.5
    order: tuple = ("self", "intra", "cross")

    def __post_init__(self):
        if self.d % self.heads:
            raise ParameterError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.n_blocks < 1:
            raise ParameterError("n_blocks must be >= 1")
        if sorted(self.order) != sorted(KINDS):
            raise ParameterError(f"block order must permute {KINDS}, got {self.order}")


@dataclass
class AttentionWeights:
    """Flat parameter store keyed ``"b{block}.{kind}.{name}"``."""

    cfg: FedlConfig
    params: dict = field(default_factory=dict)

    def layer(self, block: int, kind: str) -> dict:
        prefix = f"b{block}.{kind}."
        out = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        if not out:
            raise ParameterError(f"no weights for block {block} / {kind}")
        return out


def _layer_shapes(d: int, h: int, kind: str) -> dict:
    shapes = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w1": (d, 2 * d), "b1": (2 * d,), "w2": (2 * d, d), "b2": (d,),
        "ln1_g": (d,), "ln1_b": (d,),
    }
    if kind == "self":
        shapes.update({"ln2_g": (d,), "ln2_b": (d,), "dist_w": (h, N_DIST_FREQ)})
    return shapes


def init_weights(cfg: FedlConfig, seed: int = 0) -> AttentionWeights:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(cfg.d)
    params = {}
    for b in range(cfg.n_blocks):
        for kind in KINDS:
            for name, shape in _layer_shapes(cfg.d, cfg.heads, kind).items():
                key = f"b{b}.{kind}.{name}"
                if name.endswith("_g"):
                    params[key] = np.ones(shape)
                elif name.startswith("b") or name.endswith("_b"):
                    params[key] = np.zeros(shape)
                else:
                    params[key] = rng.uniform(-bound, bound, size=shape)
    return AttentionWeights(cfg, params)


def save_weights(w: AttentionWeights, path) -> None:
    meta = np.array(
        [w.cfg.d, w.cfg.heads, w.cfg.n_blocks], dtype=np.int64
    )
    extra = np.array([w.cfg.proportion, w.cfg.distance_scale])
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=meta, __extra__=extra, __order__=np.array(w.cfg.order), **w.params)


def load_weights(path) -> AttentionWeights:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = z["__meta__"]
            extra = z["__extra__"]
            order = tuple(str(s) for s in z["__order__"])
            params = {k: z[k].copy() for k in z.files if not k.startswith("__")}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read attention weights from {path}: {exc}") from exc
    cfg = FedlConfig(
        d=int(meta[0]), heads=int(meta[1]), n_blocks=int(meta[2]),
        proportion=float(extra[0]), distance_scale=float(extra[1]), order=order,
    )
    expected = {
        f"b{b}.{kind}.{name}": shape
        for b in range(cfg.n_blocks)
        for kind in KINDS
        for name, shape in _layer_shapes(cfg.d, cfg.heads, kind).items()
    }
    if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise FormatError(f"weight file {path} does not match its declared configuration")
    if not all(np.all(np.isfinite(v)) for v in params.values()):
        raise FormatError(f"weight file {path} contains non-finite values")
    return AttentionWeights(cfg, params)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def mlp(x: np.ndarray, w: dict) -> np.ndarray:
    return gelu(x @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]


def multihead_attention(q_feats, k_feats, v_feats, w: dict, heads: int, bias=None,
                        return_probs: bool = False):
    """Scaled dot-product attention split over ``heads``, then output-projected.

    ``bias`` is an optional ``(heads, n_q, n_k)`` additive logit term.
    """
    q_feats = np.asarray(q_feats, dtype=np.float64)
    k_feats = np.asarray(k_feats, dtype=np.float64)
    v_feats = np.asarray(v_feats, dtype=np.float64)
    d = w["wq"].shape[0]
    if q_feats.shape[1] != d or k_feats.shape[1] != d or v_feats.shape[1] != d:
        raise ParameterError(f"attention inputs must have {d} columns")
    if len(k_feats) != len(v_feats):
        raise ParameterError("keys and values must have the same number of rows")
    if d % heads:
        raise ParameterError(f"d={d} is not divisible by heads={heads}")
    nq, nk, dh = len(q_feats), len(k_feats), d // heads
    q = (q_feats @ w["wq"]).reshape(nq, heads, dh).transpose(1, 0, 2)
    k = (k_feats @ w["wk"]).reshape(nk, heads, dh).transpose(1, 0, 2)
    v = (v_feats @ w["wv"]).reshape(nk, heads, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (heads, nq, nk):
            raise ParameterError(f"bias must have shape {(heads, nq, nk)}, got {bias.shape}")
        logits = logits + bias
    probs = softmax(logits, axis=-1)
    out = (probs @ v).transpose(1, 0, 2).reshape(nq, d) @ w["wo"]
    if return_probs:
        return out, probs
    return out


def distance_encoding(points, scale: float) -> np.ndarray:
    """Sinusoidal encoding of pairwise distances, shape ``(n, n, 8)``."""
    p = np.asarray(points, dtype=np.float64)
    dist = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)) / scale
    freqs = 1.0 / 10000.0 ** (np.arange(0, N_DIST_FREQ, 2) / N_DIST_FREQ)
    ang = dist[..., None] * freqs
    enc = np.empty(dist.shape + (N_DIST_FREQ,))
    enc[..., 0::2] = np.sin(ang)
    enc[..., 1::2] = np.cos(ang)
    return enc


def distance_bias(points, w: dict, scale: float) -> np.ndarray:
    return np.einsum("ijf,hf->hij", distance_encoding(points, scale), w["dist_w"])


def self_attention_geometric(feats, points, w: dict, heads: int, distance_scale: float) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if len(points) != len(feats):
        raise ParameterError("one point per feature row is required")
    bias = distance_bias(points, w, distance_scale)
    x = layer_norm(feats + multihead_attention(feats, feats, feats, w, heads, bias), w["ln1_g"], w["ln1_b"])
    return layer_norm(x + mlp(x, w), w["ln2_g"], w["ln2_b"])


def intra_enhancement(f_ns, f_s, w: dict, heads: int) -> np.ndarray:
    """Update non-salient rows by attending to the salient rows of the same cloud."""
    f_ns = np.asarray(f_ns, dtype=np.float64)
    f_s = np.asarray(f_s, dtype=np.float64)
    if len(f_ns) == 0:
        return f_ns.copy()
    if len(f_s) == 0:
        warnings.warn("no salient rows; intra-enhancement skipped", RuntimeWarning, stacklevel=2)
        return f_ns.copy()
    a = multihead_attention(f_ns, f_s, f_s, w, heads)
    return layer_norm(f_ns + mlp(a, w), w["ln1_g"], w["ln1_b"])


def cross_attention(f_a, f_b, w: dict, heads: int) -> np.ndarray:
    f_a = np.asarray(f_a, dtype=np.float64)
    a = multihead_attention(f_a, f_b, f_b, w, heads)
    return layer_norm(f_a + mlp(a, w), w["ln1_g"], w["ln1_b"])


def _intra_update(f: np.ndarray, seg: Segmentation, w: dict, heads: int) -> np.ndarray:
    out = f.copy()
    if len(seg.non_salient):
        out[seg.non_salient] = intra_enhancement(f[seg.non_salient], f[seg.salient], w, heads)
    return out


def fedl_forward(f_p, f_q, points_p, points_q, seg_p: Segmentation, seg_q: Segmentation,
                 weights: AttentionWeights, cfg: FedlConfig | None = None):
    """Run ``cfg.n_blocks`` enhancement blocks over both superpoint feature sets."""
    cfg = cfg or weights.cfg
    f_p = np.asarray(f_p, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    for f, seg in ((f_p, seg_p), (f_q, seg_q)):
        if len(seg.salient) + len(seg.non_salient) != len(f):
            raise ParameterError("segmentation does not cover the feature rows")
    for b in range(cfg.n_blocks):
        for kind in cfg.order:
            w = weights.layer(b, kind)
            if kind == "self":
                f_p = self_attention_geometric(f_p, points_p, w, cfg.heads, cfg.distance_scale)
                f_q = self_attention_geometric(f_q, points_q, w, cfg.heads, cfg.distance_scale)
            elif kind == "intra":
                f_p = _intra_update(f_p, seg_p, w, cfg.heads)
                f_q = _intra_update(f_q, seg_q, w, cfg.heads)
            else:
                f_p, f_q = cross_attention(f_p, f_q, w, cfg.heads), cross_attention(f_q, f_p, w, cfg.heads)
    return f_p, f_q
