import numpy as np
import pytest

from geofuse.attention import AttentionParams, MlpParams
from geofuse.fusion import (
    BottleneckParams,
    Family,
    FusionDims,
    GateParams,
    StreamTag,
    TokenSequence,
    Variant,
    additive_fuse,
    bottleneck_summarize,
    dynamic_pipeline,
    gated_fuse,
    geometry_query,
    identity_embedding,
    init_fusion_params,
    interp_align,
    qformer_concat_fuse,
    resample_matrix,
    retrieve_geo_features,
    run_fusion,
    static_pipeline,
)
from geofuse.masking import DISABLED, MaskMode, MaskOutcome, MaskPlan, relevance_scores
from geofuse.tensor import ContractError, DimensionError, Tensor, backward, layer_norm, named_tensors, trace


def seq(rng, n, c, grid=None, tag=StreamTag.VISION, batch=None):
    shape = (n, c) if batch is None else (batch, n, c)
    return TokenSequence(Tensor(rng.normal(size=shape)), grid, tag)


def zero_gate(c):
    return GateParams(Tensor(np.zeros((2 * c, c))), Tensor(np.zeros(c)), Tensor(np.ones(c)), Tensor(np.zeros(c)),
                      Tensor(np.ones(c)), Tensor(np.zeros(c)))


def ln(x):
    c = x.shape[-1]
    return layer_norm(Tensor(x), Tensor(np.ones(c)), Tensor(np.zeros(c))).data


class TestTokenSequence:
    def test_grid_must_cover_length(self):
        with pytest.raises(DimensionError):
            TokenSequence(Tensor(np.zeros((5, 2))), (2, 2, 1))

    def test_rank(self):
        with pytest.raises(DimensionError):
            TokenSequence(Tensor(np.zeros(4)))


class TestInterpAlign:
    def test_identity_on_matching_grid(self, rng):
        g = seq(rng, 12, 3, (2, 3, 2), StreamTag.GEOMETRY)
        assert interp_align(g, (2, 3)).tokens.data.tobytes() == g.tokens.data.tobytes()

    @pytest.mark.parametrize("src,dst", [((3, 3), (2, 2)), ((4, 4), (2, 3)), ((8, 8), (4, 4)), ((2, 5), (4, 4))])
    def test_constant_preserved(self, src, dst):
        t = 2
        g = TokenSequence(Tensor(np.full((src[0] * src[1] * t, 3), 1.7)), (*src, t), StreamTag.GEOMETRY)
        out = interp_align(g, dst)
        assert out.grid == (*dst, t)
        np.testing.assert_allclose(out.tokens.data, 1.7, atol=1e-14)

    def test_single_cell_broadcast(self):
        g = TokenSequence(Tensor([[1.0, 2.0], [3.0, 4.0]]), (1, 1, 2), StreamTag.GEOMETRY)
        out = interp_align(g, (2, 3)).tokens.data
        np.testing.assert_array_equal(out[:6], np.tile([1.0, 2.0], (6, 1)))
        np.testing.assert_array_equal(out[6:], np.tile([3.0, 4.0], (6, 1)))

    def test_align_corners(self):
        # a linear ramp is reproduced exactly and the corners are kept
        r = resample_matrix((3, 1), (5, 1))
        np.testing.assert_allclose(r @ np.array([0.0, 1.0, 2.0]), [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_rows_are_convex(self):
        r = resample_matrix((3, 4), (2, 2))
        np.testing.assert_allclose(r.sum(1), 1.0)
        assert np.all(r >= 0)


class TestAdditive:
    def test_zero_projection(self, rng):
        f_v = seq(rng, 8, 4, (2, 2, 2))
        f_g = seq(rng, 18, 3, (3, 3, 2), StreamTag.GEOMETRY)
        proj = MlpParams([Tensor(np.zeros((3, 4)))], [Tensor(np.zeros(4))])
        np.testing.assert_array_equal(additive_fuse(f_v, f_g, proj).fused.tokens.data, f_v.tokens.data)

    def test_identity_projection_equal_grids(self, rng):
        f_v, f_g = seq(rng, 8, 4, (2, 2, 2)), seq(rng, 8, 4, (2, 2, 2), StreamTag.GEOMETRY)
        proj = MlpParams([Tensor(np.eye(4))], [Tensor(np.zeros(4))])
        out = additive_fuse(f_v, f_g, proj).fused.tokens.data
        np.testing.assert_array_equal(out, f_v.tokens.data + f_g.tokens.data)

    def test_frame_mismatch(self, rng):
        with pytest.raises(ContractError):
            additive_fuse(seq(rng, 8, 4, (2, 2, 2)), seq(rng, 4, 3, (2, 2, 1)), MlpParams.init(rng, 3, 4, 0))

    def test_identity_embedding_writes_trailing_channels(self):
        e = identity_embedding(2, 5).data
        np.testing.assert_array_equal(np.array([[1.0, 2.0]]) @ e, [[0, 0, 0, 1, 2]])

    def test_gradcheck_2x2x1(self, rng):
        f_v = TokenSequence(Tensor(rng.normal(size=(4, 4)), requires_grad=True), (2, 2, 1))
        f_g = TokenSequence(Tensor(rng.normal(size=(9, 3)), requires_grad=True), (3, 3, 1), StreamTag.GEOMETRY)
        proj = MlpParams.init(rng, 3, 4, 0)
        w = rng.normal(size=(4, 4))

        def loss():
            return (additive_fuse(f_v, f_g, proj).fused.tokens * Tensor(w)).sum()

        backward(loss())
        for t in (f_g.tokens, proj.weights[0], proj.biases[0]):
            flat, grad = t.data.reshape(-1), t.grad.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + 1e-4
                up = float(loss().data)
                flat[j] = old - 1e-4
                down = float(loss().data)
                flat[j] = old
                num = (up - down) / 2e-4
                assert abs(grad[j] - num) / max(1, abs(num), abs(grad[j])) < 1e-4


class TestQueryPath:
    def test_single_prompt_token_literal_form(self, rng):
        params = BottleneckParams(Tensor(rng.normal(size=(3, 4))), AttentionParams.init(rng, 4, 2), residual=False)
        p = seq(rng, 1, 4, None, StreamTag.PROMPT)
        out = bottleneck_summarize(params, p).tokens.data
        value = p.tokens.data @ params.attn1.wv.data @ params.attn1.wo.data
        np.testing.assert_allclose(out, np.tile(value, (3, 1)), atol=1e-12)

    def test_residual_keeps_rows_distinct(self, rng):
        params = BottleneckParams(Tensor(rng.normal(size=(3, 4))), AttentionParams.init(rng, 4, 2))
        p = seq(rng, 1, 4, None, StreamTag.PROMPT)
        out = bottleneck_summarize(params, p).tokens.data
        value = p.tokens.data @ params.attn1.wv.data @ params.attn1.wo.data
        np.testing.assert_allclose(out - params.tokens.data, np.tile(value, (3, 1)), atol=1e-12)

    @pytest.mark.parametrize("lp", [1, 2, 7])
    def test_bottleneck_shape(self, rng, lp):
        params = BottleneckParams(Tensor(rng.normal(size=(5, 4))), AttentionParams.init(rng, 4, 2))
        assert bottleneck_summarize(params, seq(rng, lp, 4)).tokens.shape == (5, 4)

    def test_geometry_query_identical_keys(self, rng):
        keys = TokenSequence(Tensor(np.tile(rng.normal(size=(1, 4)), (6, 1))), None, StreamTag.GEOMETRY)
        z, rec = geometry_query(seq(rng, 3, 4), keys, AttentionParams.init(rng, 4, 2))
        assert z.length == 3
        np.testing.assert_allclose(rec.probs.data, 1 / 6, atol=1e-12)

    def test_geometry_query_needs_projection(self, rng):
        with pytest.raises(DimensionError):
            geometry_query(seq(rng, 3, 4), seq(rng, 6, 3), AttentionParams.init(rng, 4, 2))

    def test_relevance_matches_double_loop(self, rng):
        _, rec = geometry_query(seq(rng, 3, 4), seq(rng, 5, 4), AttentionParams.init(rng, 4, 2))
        a = rec.probs.data
        u = np.zeros(5)
        for k in range(2):
            for i in range(3):
                for j in range(5):
                    u[j] += a[k, i, j]
        u /= 6
        s = (u - u.min()) / (u.max() - u.min() + 1e-6)
        np.testing.assert_allclose(relevance_scores(rec).s, s, rtol=0, atol=1e-12)

    def test_qformer_concat(self, rng):
        f_v, z = seq(rng, 8, 4, (2, 2, 2)), seq(rng, 3, 4, None, StreamTag.BOTTLENECK)
        proj = MlpParams([Tensor(np.zeros((4, 4)))], [Tensor(np.zeros(4))])
        out = qformer_concat_fuse(f_v, z, proj)
        assert out.length == 11 and out.fused.grid is None
        assert out.fused.tokens.data[:8].tobytes() == f_v.tokens.data.tobytes()
        assert np.all(out.fused.tokens.data[8:] == 0)

    def test_retrieve_single_key(self, rng):
        attn = AttentionParams.init(rng, 4, 2)
        z = seq(rng, 1, 4, None, StreamTag.BOTTLENECK)
        out = retrieve_geo_features(seq(rng, 6, 4, (3, 2, 1)), z, attn).tokens.data
        value = z.tokens.data @ attn.wv.data @ attn.wo.data
        np.testing.assert_allclose(out, np.tile(value, (6, 1)), atol=1e-12)


class TestGatedFuse:
    def test_zero_gate_is_midpoint(self, rng):
        v, g = seq(rng, 5, 4), seq(rng, 5, 4)
        fused, gate = gated_fuse(v, g, zero_gate(4))
        np.testing.assert_allclose(gate.alpha.data, 0.5)
        np.testing.assert_allclose(fused.fused.tokens.data, (ln(v.tokens.data) + ln(g.tokens.data)) / 2,
                                   rtol=0, atol=1e-12)

    def test_equal_streams(self, rng):
        v = seq(rng, 5, 4)
        params = GateParams.init(rng, 4)
        fused, gate = gated_fuse(v, v, params)
        np.testing.assert_array_equal(fused.fused.tokens.data, gate.v_normed.data)

    def test_alpha_bounds_and_betweenness(self, rng):
        for _ in range(200):
            v, g = seq(rng, 6, 4), seq(rng, 6, 4)
            params = GateParams.init(rng, 4)
            params.b_g.data[:] = rng.normal(0, 3, size=4)
            fused, gate = gated_fuse(v, g, params)
            a = gate.alpha.data
            assert np.all((a > 0) & (a < 1))
            lo = np.minimum(gate.v_normed.data, gate.g_normed.data)
            hi = np.maximum(gate.v_normed.data, gate.g_normed.data)
            f = fused.fused.tokens.data
            assert np.all(f >= lo - 1e-12) and np.all(f <= hi + 1e-12)

    def test_fully_masked_vision_closed_form(self, rng):
        c = 4
        v = TokenSequence(Tensor(np.zeros((5, c))))
        g = seq(rng, 5, c)
        params = zero_gate(c)
        params.ln_v_bias.data[:] = rng.normal(size=c)
        fused, _ = gated_fuse(v, g, params)
        # LN of a zero row is its bias
        expected = (params.ln_v_bias.data[None] + ln(g.tokens.data)) / 2
        np.testing.assert_allclose(fused.fused.tokens.data, expected, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            gated_fuse(seq(rng, 5, 4), seq(rng, 4, 4), zero_gate(4))


def make_inputs(rng, vh=2, vw=2, t=2, gh=3, gw=3, c=8, cg=6, lp=3, batch=None):
    f_v = seq(rng, vh * vw * t, c, (vh, vw, t), batch=batch)
    f_g = seq(rng, gh * gw * t, cg, (gh, gw, t), StreamTag.GEOMETRY, batch=batch)
    f_p = seq(rng, lp, c, None, StreamTag.PROMPT, batch=batch)
    return f_v, f_g, f_p


class TestPipelines:
    dims = FusionDims(width=8, geo_width=6, heads=2, bottleneck_len=2)

    @pytest.mark.parametrize("grids", [((2, 2), (2, 2)), ((2, 2), (3, 3)), ((4, 4), (8, 8))])
    def test_lengths(self, rng, grids):
        (vh, vw), (gh, gw) = grids
        f_v, f_g, f_p = make_inputs(rng, vh, vw, 2, gh, gw)
        for fam, extra in ((Family.STATIC, 0), (Family.DYNAMIC, self.dims.bottleneck_len)):
            params = init_fusion_params(rng, self.dims, Variant.A, fam)
            plan = MaskPlan(MaskMode.RANDOM if fam is Family.STATIC else MaskMode.TOPK, 0.5, 1.0)
            out = run_fusion(Variant.A, fam, f_v, f_g, f_p, params, plan, np.random.default_rng(0))
            assert out.length == vh * vw * 2 + extra
            assert out.fused.length == vh * vw * 2
            assert (out.appended_global is not None) == (fam is Family.DYNAMIC)

    def test_static_closed_form(self, rng):
        f_v, f_g, _ = make_inputs(rng)
        params = init_fusion_params(rng, self.dims, Variant.A, Family.STATIC)
        params.gate = zero_gate(8)
        out = static_pipeline(f_v, f_g, DISABLED, params).fused.tokens.data
        proj = interp_align(f_g, (2, 2)).tokens.data @ params.geo_proj.weights[0].data
        np.testing.assert_allclose(out, (ln(f_v.tokens.data) + ln(proj)) / 2, atol=1e-12)

    def test_static_rejects_topk(self, rng):
        f_v, f_g, _ = make_inputs(rng)
        params = init_fusion_params(rng, self.dims, Variant.A, Family.STATIC)
        with pytest.raises(ContractError):
            static_pipeline(f_v, f_g, MaskPlan(MaskMode.TOPK), params, np.random.default_rng(0))

    def test_dynamic_disabled_uses_raw_vision(self, rng):
        f_v, f_g, f_p = make_inputs(rng)
        params = init_fusion_params(rng, self.dims, Variant.A, Family.DYNAMIC)
        out = dynamic_pipeline(f_v, f_g, f_p, DISABLED, params)
        expected = layer_norm(f_v.tokens, params.gate.ln_v_gain, params.gate.ln_v_bias).data
        np.testing.assert_array_equal(out.gate.v_normed.data, expected)
        assert out.relevance.s.shape == (8,)
        assert out.attention.probs.shape == (2, 2, 8)

    def test_dynamic_topk_masks_most_relevant(self, rng):
        f_v, f_g, f_p = make_inputs(rng)
        params = init_fusion_params(rng, self.dims, Variant.A, Family.DYNAMIC)
        out = dynamic_pipeline(f_v, f_g, f_p, MaskPlan(MaskMode.TOPK, 0.25, 1.0), params, np.random.default_rng(0))
        top2 = set(np.argsort(-out.relevance.s, kind="stable")[:2].tolist())
        assert set(out.masks[0].mask_set) == top2

    def test_batched_per_sample_masks(self, rng):
        f_v, f_g, f_p = make_inputs(rng, batch=3)
        params = init_fusion_params(rng, self.dims, Variant.A, Family.DYNAMIC)
        rngs = [np.random.default_rng(i) for i in range(3)]
        out = dynamic_pipeline(f_v, f_g, f_p, MaskPlan(MaskMode.TOPK, 0.5, 0.5), params, rngs)
        assert len(out.masks) == 3
        assert out.fused.tokens.shape == (3, 8, 8) and out.appended_global.tokens.shape == (3, 2, 8)

    def test_outcome_override(self, rng):
        f_v, f_g, _ = make_inputs(rng)
        params = init_fusion_params(rng, self.dims, Variant.A, Family.STATIC)
        o = MaskOutcome.build(8, True, [0, 7])
        out = static_pipeline(f_v, f_g, MaskPlan(MaskMode.RANDOM, 0.9, 1.0), params, outcome=o)
        assert out.masks[0].mask_set == (0, 7)

    def test_static_dynamic_consistency(self, rng):
        # T=1, L_B=1, single prompt token: both gated paths emit one token per vision cell
        dims = FusionDims(width=8, geo_width=6, heads=2, bottleneck_len=1)
        f_v, f_g, f_p = make_inputs(rng, 2, 2, 1, 2, 2, lp=1)
        ps = init_fusion_params(rng, dims, Variant.A, Family.STATIC)
        pd = init_fusion_params(rng, dims, Variant.A, Family.DYNAMIC)
        s = static_pipeline(f_v, f_g, DISABLED, ps)
        d = dynamic_pipeline(f_v, f_g, f_p, DISABLED, pd)
        assert s.fused.tokens.shape == d.fused.tokens.shape
        for params, out in ((ps, s), (pd, d)):
            leaves = {id(n) for n in trace(out.fused.tokens.sum()).nodes}
            reachable = [n for n, t in named_tensors(params) if id(t) in leaves]
            # every learnable gated-path tensor receives gradient from the fused tokens
            gated = [n for n, _ in named_tensors(params) if not n.startswith(("align", "zg_proj"))]
            assert sorted(reachable) == sorted(gated)


class TestVariants:
    dims = FusionDims(width=8, geo_width=6, heads=2, bottleneck_len=2)

    @pytest.mark.parametrize("family", list(Family))
    @pytest.mark.parametrize("variant", list(Variant))
    def test_all_constructible(self, rng, family, variant):
        f_v, f_g, f_p = make_inputs(rng)
        params = init_fusion_params(rng, self.dims, variant, family)
        mode = MaskMode.RANDOM if family is Family.STATIC else MaskMode.TOPK
        out = run_fusion(variant, family, f_v, f_g, f_p, params, MaskPlan(mode, 0.5, 1.0), np.random.default_rng(0))
        masked = any(o.k for o in out.masks)
        assert masked == variant.masked
        if variant is Variant.F:
            assert out.fused.tokens.data.tobytes() == f_v.tokens.data.tobytes()
            assert not named_tensors(params)
        if variant.fusion == "gated":
            assert out.gate is not None

    def test_unmasked_variants_ignore_plan(self, rng):
        f_v, f_g, f_p = make_inputs(rng)
        params = init_fusion_params(rng, self.dims, Variant.D, Family.STATIC)
        a = run_fusion(Variant.D, Family.STATIC, f_v, f_g, f_p, params, MaskPlan(MaskMode.RANDOM, 1.0, 1.0),
                       np.random.default_rng(0))
        b = run_fusion(Variant.D, Family.STATIC, f_v, f_g, f_p, params)
        assert a.fused.tokens.data.tobytes() == b.fused.tokens.data.tobytes()
