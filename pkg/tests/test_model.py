"""Model blocks against independent dense oracles, plus structural invariants."""
import math

import numpy as np
import pytest

from sbaformer import autodiff as ad
from sbaformer import model as md
from sbaformer import partition as pt
from sbaformer.autodiff import Tensor
from sbaformer.errors import ShapeError
from sbaformer.graph import laplacian_pe
from sbaformer.partition import build_scale_series, plan_from_assign, uniform_plan

from test_graph import random_connected_graph


# --------------------------------------------------------------------------
# independent full-attention oracle: plain numpy, no shared code with the model


def oracle_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def oracle_gelu(x):
    u = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def oracle_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_dense_attention_branch(x, prm, heads):
    """Pre-norm attention + FFN sublayers on an (s, d) block, all keys valid."""
    s, d = x.shape
    dh = d // heads
    h = oracle_layer_norm(x, prm.ln1_gamma.data, prm.ln1_beta.data)
    q, k, v = h @ prm.wq.data, h @ prm.wk.data, h @ prm.wv.data
    att = np.zeros_like(x)
    weights = np.zeros((heads, s, s))
    for i in range(heads):
        qs, ks, vs = (m[:, i * dh : (i + 1) * dh] for m in (q, k, v))
        w = oracle_softmax(qs @ ks.T / math.sqrt(dh))
        weights[i] = w
        att[:, i * dh : (i + 1) * dh] = w @ vs
    u = x + att
    h2 = oracle_layer_norm(u, prm.ln2_gamma.data, prm.ln2_beta.data)
    y = u + oracle_gelu(h2 @ prm.ffn_w1.data) @ prm.ffn_w2.data
    return y, weights


def branch_params(d, ffn_mult, rng):
    def mat(a, b):
        return Tensor(rng.standard_normal((a, b)) / math.sqrt(a), True)

    return md.AttnParams(
        wq=mat(d, d),
        wk=mat(d, d),
        wv=mat(d, d),
        ln1_gamma=Tensor(1.0 + 0.1 * rng.standard_normal(d), True),
        ln1_beta=Tensor(0.1 * rng.standard_normal(d), True),
        ffn_w1=mat(d, ffn_mult * d),
        ffn_w2=mat(ffn_mult * d, d),
        ln2_gamma=Tensor(1.0 + 0.1 * rng.standard_normal(d), True),
        ln2_beta=Tensor(0.1 * rng.standard_normal(d), True),
    )


def tiny_model(rng, n=9, t=4, c=1, f=3, d=8, l=2, heads=2, p0=3, k_pe=3, seed=0):
    g = random_connected_graph(n, rng)
    series = build_scale_series(g, p0, l, seed=seed)
    pe = laplacian_pe(g, k_pe)
    config = md.ModelConfig(n=n, t=t, c=c, f=f, d_model=d, l=l, heads=heads, p0=p0, k_pe=k_pe)
    return md.SbaTransformer(config, series, pe.vectors, seed=seed), g


class TestIntraAttention:
    @pytest.mark.parametrize("n", [4, 8, 16])
    def test_single_subgraph_equals_dense_oracle(self, n):
        for seed in range(4):
            rng = np.random.default_rng(seed)
            d, heads = 8, 2
            prm = branch_params(d, 2, rng)
            x = rng.standard_normal((n, d))
            plan = uniform_plan(n, 1)
            xp = pt.apply_plan(Tensor(x), plan)
            y, _ = md.intra_attention(xp, plan.mask, prm, heads)
            expected, _ = oracle_dense_attention_branch(x, prm, heads)
            np.testing.assert_allclose(y.data[0], expected, atol=1e-10)

    def test_single_node_subgraphs(self):
        rng = np.random.default_rng(1)
        d = 6
        prm = branch_params(d, 2, rng)
        x = rng.standard_normal((5, d))
        plan = uniform_plan(5, 5)
        y, alpha = md.intra_attention(pt.apply_plan(Tensor(x), plan), plan.mask, prm, 2)
        np.testing.assert_allclose(alpha.data, 1.0, atol=1e-15)
        for node in range(5):
            expected, _ = oracle_dense_attention_branch(x[node : node + 1], prm, 2)
            np.testing.assert_allclose(y.data[node, 0], expected[0], atol=1e-10)

    def test_identical_nodes_identical_rows(self):
        rng = np.random.default_rng(2)
        d = 8
        prm = branch_params(d, 2, rng)
        row = rng.standard_normal(d)
        x = np.stack([row, row, rng.standard_normal(d)])
        plan = uniform_plan(3, 1)
        y, _ = md.intra_attention(pt.apply_plan(Tensor(x), plan), plan.mask, prm, 2)
        np.testing.assert_allclose(y.data[0, 0], y.data[0, 1], atol=1e-14)

    def test_padded_rows_remain_zero(self):
        rng = np.random.default_rng(3)
        d = 8
        prm = branch_params(d, 2, rng)
        plan = plan_from_assign(np.array([0, 0, 0, 1, 1]), 2)
        x = rng.standard_normal((5, d))
        y, _ = md.intra_attention(pt.apply_plan(Tensor(x), plan), plan.mask, prm, 2)
        assert (y.data[~plan.mask] == 0.0).all()


class TestInterAttention:
    def test_single_summary_is_sublayer_of_self(self):
        rng = np.random.default_rng(4)
        d = 8
        prm = branch_params(d, 2, rng)
        s = rng.standard_normal((1, d))
        out, alpha = md.inter_attention(Tensor(s), prm, 2)
        np.testing.assert_allclose(alpha.data, 1.0, atol=1e-15)
        expected, _ = oracle_dense_attention_branch(s, prm, 2)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_identical_summaries_uniform_weights(self):
        rng = np.random.default_rng(5)
        d = 8
        prm = branch_params(d, 2, rng)
        s = np.tile(rng.standard_normal(d), (6, 1))
        _, alpha = md.inter_attention(Tensor(s), prm, 2)
        np.testing.assert_allclose(alpha.data, 1.0 / 6.0, atol=1e-12)

    def test_matches_dense_oracle_for_singleton_pooling(self):
        for seed in range(4):
            rng = np.random.default_rng(seed + 10)
            d, heads, n = 8, 2, 7
            prm = branch_params(d, 2, rng)
            s = rng.standard_normal((n, d))
            out, _ = md.inter_attention(Tensor(s), prm, heads)
            expected, _ = oracle_dense_attention_branch(s, prm, heads)
            np.testing.assert_allclose(out.data, expected, atol=1e-10)


class TestPoolAndFuse:
    def test_pool_single_node_identity(self):
        plan = plan_from_assign(np.array([0, 1, 1]), 2)
        y = np.zeros((2, 2, 3))
        y[plan.mask] = np.arange(9.0).reshape(3, 3)
        s = md.pool_subgraphs(Tensor(y), plan.mask)
        np.testing.assert_array_equal(s.data[0], y[0, 0])

    def test_pool_mean_of_equal_rows(self):
        row = np.array([1.0, 2.0, 3.0])
        y = np.tile(row, (1, 4, 1))
        s = md.pool_subgraphs(Tensor(y), np.ones((1, 4), dtype=bool))
        np.testing.assert_allclose(s.data[0], row, atol=1e-15)

    def test_fuse_projection_selects_branches(self):
        rng = np.random.default_rng(6)
        p, m, d = 2, 3, 4
        y = rng.standard_normal((p, m, d))
        s = rng.standard_normal((p, d))
        valid = np.ones((p, m), dtype=bool)
        w_local = Tensor(np.vstack([np.eye(d), np.zeros((d, d))]))
        np.testing.assert_allclose(
            md.fuse(Tensor(y), Tensor(s), w_local, valid).data, y, atol=1e-14
        )
        w_global = Tensor(np.vstack([np.zeros((d, d)), np.eye(d)]))
        out = md.fuse(Tensor(y), Tensor(s), w_global, valid).data
        for part in range(p):
            np.testing.assert_allclose(out[part], np.tile(s[part], (m, 1)), atol=1e-14)

    def test_fuse_matches_scalar_concat_oracle(self):
        rng = np.random.default_rng(7)
        p, m, d = 2, 3, 4
        y = rng.standard_normal((p, m, d))
        s = rng.standard_normal((p, d))
        w = rng.standard_normal((2 * d, d))
        out = md.fuse(Tensor(y), Tensor(s), Tensor(w), np.ones((p, m), bool)).data
        for a in range(p):
            for b in range(m):
                np.testing.assert_allclose(
                    out[a, b], np.concatenate([y[a, b], s[a]]) @ w, atol=1e-12
                )


class TestEmbed:
    def test_zero_input_zero_encoding(self):
        rng = np.random.default_rng(8)
        config = md.ModelConfig(n=3, t=2, c=1, f=1, d_model=4, l=1, heads=2, p0=1, k_pe=2)
        params = md.init_params(config, seed=0)
        out = md.embed(Tensor(np.zeros((3, 2, 1))), params, np.zeros((3, 2)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_scalar_broadcast_with_ones_map(self):
        config = md.ModelConfig(n=3, t=1, c=1, f=1, d_model=4, l=1, heads=2, p0=1, k_pe=2)
        params = md.init_params(config, seed=0)
        params.embed.data = np.ones((1, 4))
        params.pe_proj.data = np.zeros((2, 4))
        x = np.array([2.0, -1.0, 3.0]).reshape(3, 1, 1)
        out = md.embed(Tensor(x), params, np.zeros((3, 2)))
        np.testing.assert_allclose(out.data, x[:, 0] * np.ones((3, 4)), atol=1e-15)

    def test_matches_explicit_loop_oracle(self):
        rng = np.random.default_rng(9)
        config = md.ModelConfig(n=4, t=3, c=2, f=1, d_model=6, l=1, heads=2, p0=1, k_pe=3)
        params = md.init_params(config, seed=1)
        x = rng.standard_normal((4, 3, 2))
        pe = rng.standard_normal((4, 3))
        out = md.embed(Tensor(x), params, pe).data
        for node in range(4):
            flat = x[node].reshape(-1)
            expected = flat @ params.embed.data + pe[node] @ params.pe_proj.data
            np.testing.assert_allclose(out[node], expected, atol=1e-12)


class TestSbaBlock:
    def test_residual_identity_at_zeroed_value_paths(self):
        rng = np.random.default_rng(10)
        model, _ = tiny_model(rng)
        blk = model.params.blocks[0]
        for side in (blk.intra, blk.inter):
            side.wv.data = np.zeros_like(side.wv.data)
            side.ffn_w2.data = np.zeros_like(side.ffn_w2.data)
        blk.fuse.data = np.zeros_like(blk.fuse.data)
        x = rng.standard_normal((model.config.n, model.config.d_model))
        out = md.sba_block(Tensor(x), model.series.plans[0], blk, model.config.heads)
        np.testing.assert_array_equal(out.data, x)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        d, heads, n = 8, 2, 9
        blk = md.SbaBlockParams(
            intra=branch_params(d, 2, rng),
            inter=branch_params(d, 2, rng),
            fuse=Tensor(rng.standard_normal((2 * d, d)), True),
        )
        assign = np.array([0, 0, 1, 1, 1, 2, 2, 0, 2])
        plan = plan_from_assign(assign, 3)
        x = rng.standard_normal((n, d))
        base = md.sba_block(Tensor(x), plan, blk, heads).data

        perm = rng.permutation(n)
        plan_p = plan_from_assign(assign[perm], 3)
        out_p = md.sba_block(Tensor(x[perm]), plan_p, blk, heads).data
        np.testing.assert_allclose(out_p, base[perm], atol=1e-12)

    def test_captured_p1_attention_equals_oracle_map(self):
        rng = np.random.default_rng(30)
        d, heads, n = 8, 2, 6
        blk = md.SbaBlockParams(
            intra=branch_params(d, 2, rng),
            inter=branch_params(d, 2, rng),
            fuse=Tensor(rng.standard_normal((2 * d, d)), True),
        )
        plan = uniform_plan(n, 1)
        x = rng.standard_normal((n, d))
        capture = []
        with ad.no_grad():
            md.sba_block(Tensor(x), plan, blk, heads, capture=capture)
        _, weights = oracle_dense_attention_branch(x, blk.intra, heads)
        np.testing.assert_allclose(
            capture[0]["intra"][0], weights.mean(axis=0), atol=1e-12
        )

    def test_block_diagonal_intra_weights(self):
        rng = np.random.default_rng(12)
        model, _ = tiny_model(rng, n=12, p0=4, l=1)
        capture = []
        x = rng.standard_normal((12, model.config.t, 1))
        with ad.no_grad():
            model.forward(Tensor(x), capture=capture)
        plan = model.series.plans[0]
        assembled = np.zeros((12, 12))
        for sub, mat in enumerate(capture[0]["intra"]):
            nodes = plan.gather[sub][plan.mask[sub]]
            assembled[np.ix_(nodes, nodes)] = mat
        for i in range(12):
            for j in range(12):
                if plan.assign[i] != plan.assign[j]:
                    assert assembled[i, j] == 0.0
        np.testing.assert_allclose(assembled.sum(axis=1), 1.0, atol=1e-9)


class TestForward:
    def test_output_shape_contract(self):
        rng = np.random.default_rng(13)
        model, _ = tiny_model(rng, n=10, t=5, c=2, f=4, p0=2, l=2)
        x = rng.standard_normal((10, 5, 2))
        assert model.predict(x).shape == (10, 4, 2)

    def test_batched_forward_matches_window_loop(self):
        rng = np.random.default_rng(14)
        model, _ = tiny_model(rng)
        xs = rng.standard_normal((3, model.config.n, model.config.t, 1))
        batched = model.predict(xs)
        for i in range(3):
            np.testing.assert_allclose(batched[i], model.predict(xs[i]), atol=1e-12)

    def test_l1_p1_end_to_end_matches_dense_composition_oracle(self):
        # a one-block single-subgraph model is embed -> dense attention branch
        # -> mean summary -> single-token exchange -> fuse -> residual -> head,
        # reproduced here step by step in plain numpy
        rng = np.random.default_rng(29)
        n, t, c, f, d, heads = 7, 4, 1, 3, 8, 2
        series = pt.ScaleSeries(plans=[uniform_plan(n, 1)])
        config = md.ModelConfig(n=n, t=t, c=c, f=f, d_model=d, l=1, heads=heads, p0=1, k_pe=2)
        pe = rng.standard_normal((n, 2))
        model = md.SbaTransformer(config, series, pe, seed=4)
        x = rng.standard_normal((n, t, c))
        out = model.predict(x)

        p = model.params
        blk = p.blocks[0]
        xe = x.reshape(n, t * c) @ p.embed.data + pe @ p.pe_proj.data
        y, _ = oracle_dense_attention_branch(xe, blk.intra, heads)
        s = y.mean(axis=0, keepdims=True)
        s2, _ = oracle_dense_attention_branch(s, blk.inter, heads)
        fused = np.concatenate([y, np.tile(s2, (n, 1))], axis=1) @ blk.fuse.data
        expected = ((fused + xe) @ p.head.data).reshape(n, f, c)
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_duplicated_node_gets_identical_forecast(self):
        # two nodes with the same history sharing a subgraph at every scale
        rng = np.random.default_rng(15)
        d, heads = 8, 2
        n, t, c, f = 6, 4, 1, 3
        assign = np.array([0, 0, 0, 1, 1, 1])
        plan = plan_from_assign(assign, 2)
        series = pt.ScaleSeries(
            plans=[plan, plan_from_assign(np.zeros(n, dtype=np.int64), 1)],
            merge_maps=[np.zeros(2, dtype=np.int64)],
        )
        config = md.ModelConfig(n=n, t=t, c=c, f=f, d_model=d, l=2, heads=heads, p0=2, k_pe=2)
        pe = np.zeros((n, 2))
        model = md.SbaTransformer(config, series, pe, seed=3)
        x = rng.standard_normal((n, t, c))
        x[1] = x[0]  # duplicate history; same subgraph, same (zero) encoding
        out = model.predict(x)
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)

    def test_padding_invariance_through_full_model(self, monkeypatch):
        rng = np.random.default_rng(16)
        model, _ = tiny_model(rng, n=11, p0=3, l=2)
        x = rng.standard_normal((11, model.config.t, 1))
        clean = model.predict(x)

        real_gather = ad.gather_nodes

        def noisy_gather(t, index, valid):
            out = real_gather(t, index, valid)
            noise = np.random.default_rng(99).standard_normal(out.data.shape)
            out.data = out.data + np.where(np.asarray(valid)[..., None], 0.0, noise)
            return out

        monkeypatch.setattr(pt, "gather_nodes", noisy_gather)
        noisy = model.predict(x)
        assert np.array_equal(clean, noisy)


class TestMaeLoss:
    def test_zero_when_equal(self):
        x = Tensor(np.ones((2, 3, 1)))
        assert md.mae_loss(x, np.ones((2, 3, 1))).item() == 0.0

    def test_constant_offset(self):
        pred = Tensor(np.full((2, 3, 1), 3.0))
        assert md.mae_loss(pred, np.full((2, 3, 1), 2.0)).item() == 1.0

    def test_scalar_oracle_random(self):
        rng = np.random.default_rng(17)
        pred, target = rng.standard_normal((2, 3, 1)), rng.standard_normal((2, 3, 1))
        expected = float(np.abs(pred - target).sum() / 6.0)
        np.testing.assert_allclose(
            md.mae_loss(Tensor(pred), target).item(), expected, atol=1e-15
        )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            md.mae_loss(Tensor(np.ones((2, 3, 1))), np.ones((2, 3, 2)))


class TestFlopsEstimate:
    def _series(self, n, p):
        return pt.ScaleSeries(plans=[uniform_plan(n, p)])

    def _config(self, n, p, d=64, heads=4):
        return md.ModelConfig(n=n, t=1, c=1, f=1, d_model=d, l=1, heads=heads, p0=p, k_pe=1)

    def test_single_subgraph_equals_dense_estimate(self):
        # p=1 degenerates to one n-token dense attention plus a trivial
        # single-summary exchange; spell out the closed form by hand
        n, h, dh = 64, 4, 16
        sba = md.flops_estimate(self._config(n, 1), self._series(n, 1))
        dense_mults = h * 2 * n * n * dh
        dense_adds = h * (n * n * (dh - 1) + n * dh * (n - 1))
        inter = h * 2 * dh + h * (dh - 1)  # p=1 summary attention
        assert sba["closed_total"] == dense_mults + dense_adds + inter

    def test_doubling_m_quadruples_intra_term(self):
        a = md.flops_estimate(self._config(256, 16), self._series(256, 16))  # m=16
        b = md.flops_estimate(self._config(512, 16), self._series(512, 16))  # m=32
        intra_a = sum(blk["intra"] for blk in a["per_block"])
        intra_b = sum(blk["intra"] for blk in b["per_block"])
        # p fixed at 16 while m doubles: quadratic in m up to the (dh-1) adds
        assert 3.8 < intra_b / intra_a < 4.05

    def test_sba_beats_dense_by_8x_at_1024(self):
        sba = md.flops_estimate(self._config(1024, 32), self._series(1024, 32))
        dense = md.flops_estimate(self._config(1024, 1), self._series(1024, 1))
        assert dense["closed_total"] / sba["closed_total"] >= 8.0
        assert abs(sba["ratio"] - 1.0) <= 0.01
        assert abs(dense["ratio"] - 1.0) <= 0.01

    def test_measured_equals_closed_form(self):
        rng = np.random.default_rng(18)
        for _ in range(3):
            n = int(rng.choice([32, 64, 128]))
            p = int(rng.choice([1, 2, 4, 8]))
            est = md.flops_estimate(self._config(n, p, d=32, heads=2), self._series(n, p))
            assert est["measured_total"] == est["closed_total"]


class TestParamsAndCheckpoint:
    def test_count_matches_closed_form(self):
        config = md.ModelConfig(n=8, t=6, c=2, f=3, d_model=16, l=2, heads=4, p0=2, k_pe=4)
        params = md.init_params(config, seed=0)
        assert params.count() == md.expected_param_count(config)

    def test_checkpoint_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(19)
        model, _ = tiny_model(rng)
        stem = tmp_path / "ckpt"
        md.save_checkpoint(stem, model.params, model.config, seed=5)
        params, config, seed = md.load_checkpoint(stem)
        assert config == model.config and seed == 5
        for (na, ta), (nb, tb) in zip(model.params.named(), params.named()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_checkpoint_rewrite_byte_identical(self, tmp_path):
        rng = np.random.default_rng(20)
        model, _ = tiny_model(rng)
        stem = tmp_path / "ckpt"
        md.save_checkpoint(stem, model.params, model.config, seed=1)
        first = (stem.with_suffix(".bin").read_bytes(), stem.with_suffix(".json").read_bytes())
        md.save_checkpoint(stem, model.params, model.config, seed=1)
        assert first == (
            stem.with_suffix(".bin").read_bytes(),
            stem.with_suffix(".json").read_bytes(),
        )


class TestFullModelGradients:
    def test_gradcheck_against_finite_differences(self):
        from test_autodiff import assert_grads_close

        rng = np.random.default_rng(21)
        model, _ = tiny_model(rng, n=6, t=3, c=1, f=2, d=4, l=1, heads=2, p0=2, k_pe=2)
        x = rng.standard_normal((6, 3, 1))
        target = rng.standard_normal((6, 2, 1))

        def loss_value():
            with ad.no_grad():
                return md.mae_loss(model.forward(Tensor(x)), target).item()

        model.params.zero_grad()
        md.mae_loss(model.forward(Tensor(x)), target).backward()
        h = 1e-5
        for name, t in model.params.named():
            if "block0" not in name and name not in ("embed", "head"):
                continue
            flat = t.data.ravel()
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_value()
                flat[i] = orig - h
                down = loss_value()
                flat[i] = orig
                num[i] = (up - down) / (2 * h)
            assert_grads_close(t.grad.ravel(), num)
