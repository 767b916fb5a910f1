import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mce_fss import tensor as T
from mce_fss.backbone import FeaturePyramid
from mce_fss.mce import (MCEConfig, MCEEncoder, build_additive_mask, mce_forward, mlp_block,
                         project, query_branch_attention, support_branch_attention,
                         support_logits, tokenize, untokenize)
from mce_fss.tensor import ContractError, Tensor

import oracles


def rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


def random_keep(rng, n):
    keep = (rng.random(n) < 0.5).astype(np.uint8)
    keep[rng.integers(n)] = 1
    return keep


def toy_pyramids(rng, h, widths):
    def pyr():
        return FeaturePyramid({2: Tensor(rand(rng, widths[0], h // 2, h // 2)),
                               3: Tensor(rand(rng, widths[1], h // 4, h // 4)),
                               4: Tensor(rand(rng, widths[2], h // 4, h // 4))})
    return pyr(), pyr()


class TestTokens:
    def test_row_major(self):
        feat = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(tokenize(feat).tokens.data, [[1], [2], [3], [4]])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 3, 4, 5)
        seq = tokenize(Tensor(x))
        assert seq.tokens.shape == (20, 3)
        assert untokenize(seq.tokens, 4, 5).data.tobytes() == x.tobytes()

    def test_additive_mask(self):
        np.testing.assert_array_equal(build_additive_mask(np.array([1, 0, 1])).bias, [0, -np.inf, 0])
        np.testing.assert_array_equal(build_additive_mask(np.ones((2, 2))).bias, np.zeros(4))
        with pytest.raises(ContractError):
            build_additive_mask(np.zeros(3))


class TestProject:
    def test_zero_and_identity_heads(self):
        rng = np.random.default_rng(1)
        tok = Tensor(rand(rng, 5, 3))
        zero = {k: Tensor(np.zeros((3, 3))) for k in "qkv"}
        assert all(np.all(t.data == 0) for t in project(tok, zero))
        eye = {k: Tensor(np.eye(3)) for k in "qkv"}
        for t in project(tok, eye):
            np.testing.assert_array_equal(t.data, tok.data)

    def test_per_token_oracle(self):
        rng = np.random.default_rng(2)
        tok = rand(rng, 6, 4)
        heads = {k: rand(rng, 4, 3) for k in "qkv"}
        out = project(Tensor(tok), {k: Tensor(v) for k, v in heads.items()})
        for t, name in zip(out, "qkv"):
            ref = np.array([[sum(tok[i, c] * heads[name][c, j] for c in range(4)) for j in range(3)]
                            for i in range(6)])
            np.testing.assert_allclose(t.data, ref, rtol=0, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            project(Tensor(np.ones((4, 3))), {k: Tensor(np.ones((2, 2))) for k in "qkv"})


class TestSupportBranch:
    def test_uniform_attention(self):
        rng = np.random.default_rng(3)
        k = Tensor(np.tile(rand(rng, 1, 4), (5, 1)))
        v = rand(rng, 5, 4)
        out = support_branch_attention(Tensor(rand(rng, 5, 4)), k, Tensor(v), build_additive_mask(np.ones(5)))
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (5, 1)), rtol=0, atol=1e-14)

    def test_single_survivor(self):
        rng = np.random.default_rng(4)
        v = rand(rng, 5, 4)
        keep = np.zeros(5)
        keep[3] = 1
        out = support_branch_attention(Tensor(rand(rng, 5, 4)), Tensor(rand(rng, 5, 4)), Tensor(v),
                                       build_additive_mask(keep))
        np.testing.assert_array_equal(out.data, np.tile(v[3], (5, 1)))

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        q, k, v = rand(rng, 6, 4), rand(rng, 6, 4), rand(rng, 6, 4)
        keep = random_keep(rng, 6)
        out = support_branch_attention(Tensor(q), Tensor(k), Tensor(v), build_additive_mask(keep))
        np.testing.assert_allclose(out.data, oracles.attention(q, k, v, key_keep=keep), rtol=0, atol=1e-10)

    def test_logit_scale_covariance(self):
        rng = np.random.default_rng(6)
        q, k = rand(rng, 5, 3), rand(rng, 5, 3)
        c = 1.7
        a = support_logits(Tensor(q), Tensor(k)).data
        b = support_logits(Tensor(c * q), Tensor(c * k)).data
        np.testing.assert_allclose(b, c * c * a, rtol=1e-12, atol=0)

    def test_two_heads_match_split_oracle(self):
        rng = np.random.default_rng(7)
        q, k, v = rand(rng, 6, 4), rand(rng, 6, 4), rand(rng, 6, 4)
        keep = random_keep(rng, 6)
        out = support_branch_attention(Tensor(q), Tensor(k), Tensor(v), build_additive_mask(keep), n_heads=2)
        ref = np.concatenate([oracles.attention(q[:, s], k[:, s], v[:, s], key_keep=keep)
                              for s in (slice(0, 2), slice(2, 4))], axis=1)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)


class TestQueryBranch:
    def test_one_surviving_value(self):
        rng = np.random.default_rng(8)
        n = 5
        s_v = rand(rng, n, 3)
        keep = np.zeros(n)
        keep[2] = 1
        zeros = Tensor(np.zeros((n, 3)))
        out = query_branch_attention(zeros, zeros, Tensor(s_v), build_additive_mask(keep))
        np.testing.assert_allclose(out.data, np.tile(s_v[2] / n, (n, 1)), rtol=0, atol=1e-15)

    def test_uniform_attention(self):
        rng = np.random.default_rng(9)
        s_v = rand(rng, 4, 3)
        k = Tensor(np.tile(rand(rng, 1, 3), (4, 1)))
        out = query_branch_attention(Tensor(rand(rng, 4, 3)), k, Tensor(s_v), build_additive_mask(np.ones(4)))
        np.testing.assert_allclose(out.data, np.tile(s_v.mean(axis=0), (4, 1)), rtol=0, atol=1e-14)

    def test_pre_zeroing_is_idempotent(self):
        rng = np.random.default_rng(10)
        q, k, v = rand(rng, 6, 3), rand(rng, 6, 3), rand(rng, 6, 3)
        keep = random_keep(rng, 6)
        mask = build_additive_mask(keep)
        a = query_branch_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
        b = query_branch_attention(Tensor(q), Tensor(k), Tensor(v * keep[:, None]), mask).data
        assert a.tobytes() == b.tobytes()

    def test_loop_oracle(self):
        rng = np.random.default_rng(11)
        q, k, v = rand(rng, 6, 4), rand(rng, 6, 4), rand(rng, 6, 4)
        keep = random_keep(rng, 6)
        out = query_branch_attention(Tensor(q), Tensor(k), Tensor(v), build_additive_mask(keep))
        np.testing.assert_allclose(out.data, oracles.attention(q, k, v, value_keep=keep), rtol=0, atol=1e-10)


class TestMaskingProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 9), st.integers(0, 2**31 - 1))
    def test_masked_keys_get_zero_weight(self, n, seed):
        rng = np.random.default_rng(seed)
        keep = random_keep(rng, n)
        scores = support_logits(Tensor(rand(rng, n, 3) * 10), Tensor(rand(rng, n, 3) * 10))
        w = T.masked_softmax(scores, build_additive_mask(keep).bias).data
        assert np.all(w[:, keep == 0] == 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 9), st.integers(0, 2**31 - 1))
    def test_background_values_never_reach_query_branch(self, n, seed):
        rng = np.random.default_rng(seed)
        q, k, v = rand(rng, n, 3), rand(rng, n, 3), rand(rng, n, 3)
        keep = random_keep(rng, n)
        mask = build_additive_mask(keep)
        v2 = v.copy()
        v2[keep == 0] = rng.normal(scale=1e6, size=((keep == 0).sum(), 3))
        a = query_branch_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
        b = query_branch_attention(Tensor(q), Tensor(k), Tensor(v2), mask).data
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_joint_permutation_equivariance(self, n, seed):
        # R_Q pairs query key j with support value j, so only a permutation
        # applied to both images at once is a symmetry of the encoder
        rng = np.random.default_rng(seed)
        sq, sk, sv, qq, qk, qv = (rand(rng, n, 3) for _ in range(6))
        keep = random_keep(rng, n)
        perm = rng.permutation(n)
        m, mp = build_additive_mask(keep), build_additive_mask(keep[perm])
        r_s = support_branch_attention(Tensor(sq), Tensor(sk), Tensor(qv), m).data
        r_q = query_branch_attention(Tensor(qq), Tensor(qk), Tensor(sv), m).data
        r_s2 = support_branch_attention(Tensor(sq[perm]), Tensor(sk[perm]), Tensor(qv[perm]), mp).data
        r_q2 = query_branch_attention(Tensor(qq[perm]), Tensor(qk[perm]), Tensor(sv[perm]), mp).data
        np.testing.assert_allclose(r_s2, r_s[perm], rtol=0, atol=1e-12)
        np.testing.assert_allclose(r_q2, r_q[perm], rtol=0, atol=1e-12)

    def test_support_only_permutation_moves_r_q(self):
        rng = np.random.default_rng(12)
        qq, qk, sv = rand(rng, 6, 3), rand(rng, 6, 3), rand(rng, 6, 3)
        keep = np.ones(6)
        perm = np.roll(np.arange(6), 1)
        a = query_branch_attention(Tensor(qq), Tensor(qk), Tensor(sv), build_additive_mask(keep)).data
        b = query_branch_attention(Tensor(qq), Tensor(qk), Tensor(sv[perm]), build_additive_mask(keep)).data
        assert not np.allclose(a, b)


class TestMlpBlock:
    def test_zero_weights(self):
        d = 3
        p = {"ln.gain": Tensor(np.ones(d)), "ln.shift": Tensor(np.zeros(d)),
             "fc1.weight": Tensor(np.zeros((d, 2 * d))), "fc1.bias": Tensor(np.zeros(2 * d)),
             "fc2.weight": Tensor(np.zeros((2 * d, d))), "fc2.bias": Tensor(np.zeros(d))}
        rng = np.random.default_rng(13)
        out = mlp_block(Tensor(rand(rng, 4, d)), p)
        assert out.shape == (4, d) and np.all(out.data == 0)


class TestMceForward:
    def test_shape_at_64px(self):
        rng = np.random.default_rng(14)
        enc = MCEEncoder(MCEConfig(), rng)
        supp, qry = toy_pyramids(rng, 64, (32, 64, 64))
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[10:30, 20:40] = 1
        with T.no_grad():
            out = mce_forward(enc, supp, qry, mask)
        assert out.shape == (64, 16, 16)
        assert np.all(np.isfinite(out.data))

    @pytest.mark.parametrize("output,levels", [("fusion", (2, 3, 4)), ("query", (2, 3, 4)),
                                               ("support", (3,)), ("fusion", (4,))])
    def test_straight_line_oracle(self, output, levels):
        rng = np.random.default_rng(15)
        widths = (3, 4, 2)
        cfg = MCEConfig(widths, token_dim=3, out_channels=2, levels=levels, output=output)
        enc = MCEEncoder(cfg, rng)
        for p in enc.params.values():  # avoid trivial gains / biases
            p.data[...] = rng.uniform(-1, 1, size=p.shape)
        supp, qry = toy_pyramids(rng, 8, widths)  # 2x2 attention grid = 4 tokens
        binmask = np.array([[1, 0], [1, 1]], dtype=np.uint8)
        out = enc.fuse(enc.branch_maps(supp, qry, binmask)).data
        ref = oracles.mce_straight_line({lv: supp[lv].data for lv in (2, 3, 4)},
                                        {lv: qry[lv].data for lv in (2, 3, 4)},
                                        binmask, {k: v.data for k, v in enc.params.items()},
                                        levels=levels, branches=cfg.branches)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)

    def test_fusion_reduces_to_query_only(self):
        rng = np.random.default_rng(16)
        widths, d = (3, 4, 2), 3
        fusion = MCEEncoder(MCEConfig(widths, token_dim=d, out_channels=2), rng)
        query = MCEEncoder(MCEConfig(widths, token_dim=d, out_channels=2, output="query"), rng)
        for name, p in query.params.items():
            if name != "fuse.weight":
                p.data[...] = fusion.params[name].data
        cols = np.concatenate([np.arange(i * 2 * d + d, (i + 1) * 2 * d) for i in range(3)])
        query.params["fuse.weight"].data[...] = fusion.params["fuse.weight"].data[:, cols]
        supp, qry = toy_pyramids(rng, 16, widths)
        binmask = random_keep(rng, 16).reshape(4, 4)
        maps = fusion.branch_maps(supp, qry, binmask)
        for lv in (2, 3, 4):
            maps[lv, "support"] = Tensor(np.zeros(maps[lv, "support"].shape))
        a = fusion.fuse(maps).data
        b = query.fuse(query.branch_maps(supp, qry, binmask)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_background_support_features_never_reach_query_maps(self):
        rng = np.random.default_rng(17)
        widths = (3, 4, 2)
        enc = MCEEncoder(MCEConfig(widths, token_dim=3, out_channels=2, levels=(3,), output="query"), rng)
        supp, qry = toy_pyramids(rng, 16, widths)
        binmask = random_keep(rng, 16).reshape(4, 4)
        a = enc.branch_maps(supp, qry, binmask)[3, "query"].data
        s3 = supp[3].data.copy()
        s3[:, binmask == 0] = 1e3
        supp2 = FeaturePyramid({**supp, 3: Tensor(s3)})
        b = enc.branch_maps(supp2, qry, binmask)[3, "query"].data
        assert a.tobytes() == b.tobytes()

    def test_resolution_mismatch(self):
        rng = np.random.default_rng(18)
        widths = (3, 4, 2)
        enc = MCEEncoder(MCEConfig(widths, token_dim=3, out_channels=2), rng)
        supp, _ = toy_pyramids(rng, 16, widths)
        _, qry = toy_pyramids(rng, 8, widths)
        with pytest.raises(ContractError):
            enc.branch_maps(supp, qry, np.ones((4, 4)))

    def test_rejects_unknown_output(self):
        with pytest.raises(ContractError):
            MCEConfig(output="both")
