import math

import numpy as np
import pytest

from salreg.attention import (
    FedlConfig,
    cross_attention,
    distance_bias,
    fedl_forward,
    init_weights,
    intra_enhancement,
    layer_norm,
    load_weights,
    mlp,
    multihead_attention,
    save_weights,
    self_attention_geometric,
    softmax,
)
from salreg.errors import FormatError, ParameterError
from salreg.geom import RigidTransform, apply_transform, random_rotation
from salreg.saliency import segment_by_saliency

D, H = 32, 4


def weights(seed=4, n_blocks=1):
    return init_weights(FedlConfig(d=D, heads=H, n_blocks=n_blocks), seed)


def ref_attention(q, k, v, w, heads, bias=None):
    """Head-by-head loop with an explicit exp/sum softmax."""
    d = q.shape[1]
    dh = d // heads
    Q, K, V = q @ w["wq"], k @ w["wk"], v @ w["wv"]
    out = np.zeros((len(q), d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for a in range(len(q)):
            logits = np.array([Q[a, sl] @ K[b, sl] / math.sqrt(dh) for b in range(len(k))])
            if bias is not None:
                logits = logits + bias[h, a]
            e = np.exp(logits - logits.max())
            out[a, sl] = (e / e.sum()) @ V[:, sl]
    return out @ w["wo"]


def ref_ln(x, g, b):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = row.mean()
        out[i] = (row - mu) / math.sqrt(((row - mu) ** 2).mean() + 1e-5) * g + b
    return out


def ref_update(base, attended, w):
    return ref_ln(base + mlp(attended, w), w["ln1_g"], w["ln1_b"])


def segmentation(n, seed):
    return segment_by_saliency(np.random.default_rng(seed).random(n), 0.35)


class TestPrimitives:
    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(0).normal(scale=50, size=(20, 30))
        assert np.abs(softmax(x).sum(-1) - 1).max() < 1e-12

    def test_softmax_stable_for_large_logits(self):
        p = softmax(np.array([[1e4, 1e4 - 1, -1e4]]))
        assert np.all(np.isfinite(p))
        assert p[0, 0] == pytest.approx(1 / (1 + math.exp(-1)))

    def test_layer_norm_zero_mean_unit_var(self):
        x = np.random.default_rng(1).normal(3, 5, size=(7, D))
        y = layer_norm(x, np.ones(D), np.zeros(D))
        assert np.abs(y.mean(1)).max() < 1e-12
        assert np.abs(y.var(1) - 1).max() < 1e-3


class TestMultihead:
    def test_single_key_returns_projected_value(self):
        w = weights().layer(0, "cross")
        rng = np.random.default_rng(2)
        q, kv = rng.normal(size=(5, D)), rng.normal(size=(1, D))
        out = multihead_attention(q, kv, kv, w, H)
        expected = kv @ w["wv"] @ w["wo"]
        assert np.abs(out - expected).max() < 1e-12

    def test_duplicated_keys_do_not_change_output(self):
        w = weights().layer(0, "cross")
        rng = np.random.default_rng(3)
        q, kv = rng.normal(size=(4, D)), rng.normal(size=(3, D))
        once = multihead_attention(q, kv, kv, w, H)
        thrice = multihead_attention(q, np.repeat(kv, 3, 0), np.repeat(kv, 3, 0), w, H)
        assert np.abs(once - thrice).max() < 1e-9

    def test_matches_reference(self):
        w = weights().layer(0, "cross")
        x = np.random.default_rng(4).normal(size=(6, D))
        assert np.abs(multihead_attention(x, x, x, w, H) - ref_attention(x, x, x, w, H)).max() < 1e-12

    def test_probabilities_sum_to_one(self):
        w = weights().layer(0, "self")
        x = np.random.default_rng(4).normal(size=(6, D))
        bias = np.random.default_rng(5).normal(size=(H, 6, 6))
        _, probs = multihead_attention(x, x, x, w, H, bias, return_probs=True)
        assert np.abs(probs.sum(-1) - 1).max() < 1e-9

    def test_shape_errors(self):
        w = weights().layer(0, "cross")
        with pytest.raises(ParameterError):
            multihead_attention(np.zeros((2, 8)), np.zeros((2, D)), np.zeros((2, D)), w, H)
        with pytest.raises(ParameterError):
            multihead_attention(np.zeros((2, D)), np.zeros((3, D)), np.zeros((2, D)), w, H)
        with pytest.raises(ParameterError):
            multihead_attention(np.zeros((2, D)), np.zeros((2, D)), np.zeros((2, D)), w, H,
                                bias=np.zeros((H, 2, 3)))


class TestGeometricSelfAttention:
    def test_single_point(self):
        w = weights().layer(0, "self")
        out = self_attention_geometric(np.random.default_rng(0).normal(size=(1, D)), np.zeros((1, 3)), w, H, 0.5)
        assert out.shape == (1, D) and np.all(np.isfinite(out))

    def test_matches_reference(self):
        w = weights().layer(0, "self")
        rng = np.random.default_rng(4)
        f, pts = rng.normal(size=(10, D)), rng.random((10, 3))
        bias = distance_bias(pts, w, 0.5)
        x = ref_ln(f + ref_attention(f, f, f, w, H, bias), w["ln1_g"], w["ln1_b"])
        ref = ref_ln(x + mlp(x, w), w["ln2_g"], w["ln2_b"])
        assert np.abs(self_attention_geometric(f, pts, w, H, 0.5) - ref).max() < 1e-10

    @pytest.mark.parametrize("seed", range(1, 6))
    def test_rigid_invariance(self, seed):
        w = weights(seed).layer(0, "self")
        rng = np.random.default_rng(seed)
        f, pts = rng.normal(size=(64, D)), rng.random((64, 3)) * 3
        t = RigidTransform(random_rotation(rng), rng.normal(size=3))
        a = self_attention_geometric(f, pts, w, H, 0.5)
        b = self_attention_geometric(f, apply_transform(t, pts), w, H, 0.5)
        assert np.abs(a - b).max() < 1e-6

    def test_permutation_equivariance(self):
        w = weights().layer(0, "self")
        rng = np.random.default_rng(4)
        f, pts = rng.normal(size=(20, D)), rng.random((20, 3))
        perm = rng.permutation(20)
        a = self_attention_geometric(f, pts, w, H, 0.5)
        b = self_attention_geometric(f[perm], pts[perm], w, H, 0.5)
        assert np.abs(a[perm] - b).max() < 1e-9

    def test_point_count_mismatch(self):
        with pytest.raises(ParameterError):
            self_attention_geometric(np.zeros((3, D)), np.zeros((2, 3)), weights().layer(0, "self"), H, 0.5)


class TestIntraAndCross:
    def test_empty_non_salient(self):
        out = intra_enhancement(np.zeros((0, D)), np.ones((2, D)), weights().layer(0, "intra"), H)
        assert out.shape == (0, D)

    def test_empty_salient_warns_and_skips(self):
        f = np.random.default_rng(0).normal(size=(3, D))
        with pytest.warns(RuntimeWarning):
            out = intra_enhancement(f, np.zeros((0, D)), weights().layer(0, "intra"), H)
        assert np.array_equal(out, f)

    def test_single_salient_row(self):
        w = weights().layer(0, "intra")
        rng = np.random.default_rng(1)
        f_ns, s = rng.normal(size=(5, D)), rng.normal(size=(1, D))
        expected = ref_update(f_ns, np.repeat(s @ w["wv"] @ w["wo"], 5, 0), w)
        assert np.abs(intra_enhancement(f_ns, s, w, H) - expected).max() < 1e-12

    def test_intra_matches_reference(self):
        w = weights().layer(0, "intra")
        rng = np.random.default_rng(4)
        f = rng.normal(size=(12, D))
        seg = segmentation(12, 4)
        ns, s = f[seg.non_salient], f[seg.salient]
        ref = ref_update(ns, ref_attention(ns, s, s, w, H), w)
        assert np.abs(intra_enhancement(ns, s, w, H) - ref).max() < 1e-10

    def test_cross_matches_reference(self):
        w = weights().layer(0, "cross")
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(7, D)), rng.normal(size=(9, D))
        ref = ref_update(a, ref_attention(a, b, b, w, H), w)
        assert np.abs(cross_attention(a, b, w, H) - ref).max() < 1e-10

    def test_cross_single_key_rows_equal_before_residual(self):
        w = weights().layer(0, "cross")
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(4, D)), rng.normal(size=(1, D))
        att = multihead_attention(a, b, b, w, H)
        assert np.abs(att - att[0]).max() < 1e-12


class TestFedlForward:
    def inputs(self, seed, n_p=30, n_q=25):
        rng = np.random.default_rng(seed)
        return (rng.normal(size=(n_p, D)), rng.normal(size=(n_q, D)), rng.random((n_p, 3)), rng.random((n_q, 3)),
                segmentation(n_p, seed), segmentation(n_q, seed + 100))

    def test_composition_oracle(self):
        f_p, f_q, x_p, x_q, s_p, s_q = self.inputs(4)
        w = weights(4, n_blocks=2)
        out_p, out_q = fedl_forward(f_p, f_q, x_p, x_q, s_p, s_q, w)
        a, b = f_p, f_q
        for blk in range(2):
            ws, wi, wc = (w.layer(blk, k) for k in ("self", "intra", "cross"))
            a = self_attention_geometric(a, x_p, ws, H, 0.5)
            b = self_attention_geometric(b, x_q, ws, H, 0.5)
            a, b = a.copy(), b.copy()
            a[s_p.non_salient] = intra_enhancement(a[s_p.non_salient], a[s_p.salient], wi, H)
            b[s_q.non_salient] = intra_enhancement(b[s_q.non_salient], b[s_q.salient], wi, H)
            a, b = cross_attention(a, b, wc, H), cross_attention(b, a, wc, H)
        assert np.array_equal(out_p, a) and np.array_equal(out_q, b)

    @pytest.mark.parametrize("seed", range(1, 6))
    def test_salient_rows_untouched_by_intra(self, seed):
        f_p, f_q, x_p, x_q, s_p, s_q = self.inputs(seed)
        w = weights(seed, n_blocks=1)
        before = self_attention_geometric(f_p, x_p, w.layer(0, "self"), H, 0.5)
        after = before.copy()
        after[s_p.non_salient] = intra_enhancement(before[s_p.non_salient], before[s_p.salient],
                                                   w.layer(0, "intra"), H)
        assert np.array_equal(after[s_p.salient], before[s_p.salient])
        assert not np.array_equal(after[s_p.non_salient], before[s_p.non_salient])

    @pytest.mark.parametrize("seed", range(1, 6))
    def test_joint_permutation_equivariance(self, seed):
        f_p, f_q, x_p, x_q, s_p, s_q = self.inputs(seed, 64, 48)
        w = weights(seed, n_blocks=3)
        out_p, out_q = fedl_forward(f_p, f_q, x_p, x_q, s_p, s_q, w)
        rng = np.random.default_rng(seed + 50)
        pp, pq = rng.permutation(64), rng.permutation(48)
        inv_p, inv_q = np.argsort(pp), np.argsort(pq)
        sp2 = type(s_p)(np.sort(inv_p[s_p.salient]), np.sort(inv_p[s_p.non_salient]), s_p.proportion)
        sq2 = type(s_q)(np.sort(inv_q[s_q.salient]), np.sort(inv_q[s_q.non_salient]), s_q.proportion)
        perm_p, perm_q = fedl_forward(f_p[pp], f_q[pq], x_p[pp], x_q[pq], sp2, sq2, w)
        assert np.abs(perm_p - out_p[pp]).max() < 1e-9
        assert np.abs(perm_q - out_q[pq]).max() < 1e-9

    def test_degenerate_weights_finite(self):
        f_p, f_q, x_p, x_q, s_p, s_q = self.inputs(2)
        w = weights(2, n_blocks=1)
        for key in w.params:
            if key.endswith((".w1", ".w2")):
                w.params[key] = np.zeros_like(w.params[key])
        out_p, out_q = fedl_forward(f_p, f_q, x_p, x_q, s_p, s_q, w)
        assert np.all(np.isfinite(out_p)) and out_q.shape == f_q.shape

    def test_segmentation_must_cover_rows(self):
        f_p, f_q, x_p, x_q, s_p, s_q = self.inputs(3)
        with pytest.raises(ParameterError):
            fedl_forward(f_p[:-1], f_q, x_p[:-1], x_q, s_p, s_q, weights(3))

    def test_zero_blocks_rejected(self):
        with pytest.raises(ParameterError):
            FedlConfig(n_blocks=0)


class TestWeights:
    def test_same_seed_identical(self):
        a, b = weights(7), weights(7)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_different_seeds_differ(self):
        a, b = weights(1), weights(2)
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_init_bounds(self):
        w = weights(0)
        bound = 1 / math.sqrt(D)
        assert max(np.abs(v).max() for k, v in w.params.items() if k.endswith(".wq")) <= bound

    def test_save_load_bitwise(self, tmp_path):
        w = weights(9, n_blocks=3)
        save_weights(w, tmp_path / "w.npz")
        back = load_weights(tmp_path / "w.npz")
        assert back.cfg == w.cfg
        assert set(back.params) == set(w.params)
        assert all(np.array_equal(back.params[k], w.params[k]) for k in w.params)

    def test_corrupt_file(self, tmp_path):
        p = tmp_path / "w.npz"
        p.write_bytes(b"not a weight file")
        with pytest.raises(FormatError):
            load_weights(p)

    def test_missing_tensor(self, tmp_path):
        w = weights(9)
        del w.params["b0.cross.wq"]
        save_weights(w, tmp_path / "w.npz")
        with pytest.raises(FormatError):
            load_weights(tmp_path / "w.npz")
