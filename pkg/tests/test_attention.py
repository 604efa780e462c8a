import numpy as np
import pytest

from geofuse.attention import AttentionParams, MlpParams, cross_attention, mlp_forward
from geofuse.fusion import StreamTag, TokenSequence
from geofuse.tensor import DimensionError, Tensor, backward

from conftest import numeric_grad, param


def fixed_params(c=4, heads=2, wq=None, wk=None, wv=None, wo=None):
    eye = np.eye(c)
    return AttentionParams(*(Tensor(w if w is not None else eye) for w in (wq, wk, wv, wo)), heads=heads)


class TestCrossAttention:
    def test_identical_keys_give_uniform_probs(self, rng):
        params = AttentionParams.init(rng, 4, 2)
        kv = Tensor(np.tile(rng.normal(size=(1, 4)), (3, 1)))
        rec = cross_attention(Tensor(rng.normal(size=(2, 4))), kv, params)
        np.testing.assert_allclose(rec.probs.data, 1 / 3, atol=1e-9)
        value_mean = (kv.data @ params.wv.data) @ params.wo.data
        np.testing.assert_allclose(rec.context.data, np.broadcast_to(value_mean.mean(0), (2, 4)), atol=1e-9)

    def test_dominant_key(self):
        c = 2
        wq = np.array([[1.0, 0.0], [0.0, 0.0]])
        keys = np.array([[50.0 * np.sqrt(c), 0.0], [0.0, 0.0], [0.0, 3.0]])
        params = fixed_params(c, 1, wq=wq)
        rec = cross_attention(Tensor([[1.0, 0.0]]), Tensor(keys), params)
        assert rec.probs.data[0, 0, 0] > 1 - 1e-9
        np.testing.assert_allclose(rec.context.data[0], keys[0], atol=1e-6)

    def test_probs_are_row_stochastic(self, rng):
        params = AttentionParams.init(rng, 8, 4)
        rec = cross_attention(Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(2, 7, 8))), params)
        assert rec.probs.shape == (2, 4, 5, 7)
        np.testing.assert_allclose(rec.probs.data.sum(-1), 1.0, atol=1e-6)

    def test_key_permutation_equivariance(self, rng):
        params = AttentionParams.init(rng, 8, 2)
        q, kv = Tensor(rng.normal(size=(3, 8))), rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        a = cross_attention(q, Tensor(kv), params)
        b = cross_attention(q, Tensor(kv[perm]), params)
        np.testing.assert_allclose(a.context.data, b.context.data, atol=1e-9)
        np.testing.assert_allclose(a.probs.data[..., perm], b.probs.data, atol=1e-12)

    def test_channel_mismatch(self, rng):
        params = AttentionParams.init(rng, 8, 2)
        with pytest.raises(DimensionError):
            cross_attention(Tensor(np.zeros((2, 8))), Tensor(np.zeros((3, 6))), params)

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(DimensionError):
            AttentionParams.init(rng, 6, 4)

    def test_accepts_token_sequences(self, rng):
        params = AttentionParams.init(rng, 4, 2)
        q = TokenSequence(Tensor(rng.normal(size=(2, 4))), None, StreamTag.BOTTLENECK)
        kv = TokenSequence(Tensor(rng.normal(size=(3, 4))), None, StreamTag.GEOMETRY)
        assert cross_attention(q, kv, params).context.shape == (2, 4)

    def test_gradient_of_sum_context(self, rng):
        params = AttentionParams.init(rng, 4, 2)
        q, kv = param(rng, 3, 4), param(rng, 5, 4)
        backward(cross_attention(q, kv, params).context.sum())
        for t in (params.wq, params.wk, params.wv, params.wo, q, kv):
            num = numeric_grad(lambda: float(cross_attention(q, kv, params).context.data.sum()), t.data, 1e-4)
            err = np.abs(t.grad - num) / np.maximum(1.0, np.maximum(np.abs(t.grad), np.abs(num)))
            assert err.max() < 1e-4


class TestMlp:
    def test_zero_map(self, rng):
        params = MlpParams.init(rng, 4, 4, 8)
        for w in params.weights:
            w.data[:] = 0.0
        assert np.all(mlp_forward(Tensor(rng.normal(size=(3, 4))), params).data == 0.0)

    def test_identity_linear(self, rng):
        params = MlpParams([Tensor(np.eye(4))], [Tensor(np.zeros(4))])
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(mlp_forward(Tensor(x), params).data, x)

    def test_default_hidden_width(self, rng):
        params = MlpParams.init(rng, 6, 8)
        assert [w.shape for w in params.weights] == [(6, 16), (16, 8)]
        assert len(MlpParams.init(rng, 6, 8, 0).weights) == 1

    def test_tokenwise(self, rng):
        params = MlpParams.init(rng, 4, 4)
        x = rng.normal(size=(5, 4))
        y0 = mlp_forward(Tensor(x), params).data
        x[2] += 1.0
        y1 = mlp_forward(Tensor(x), params).data
        changed = np.any(y0 != y1, axis=1)
        assert changed.tolist() == [False, False, True, False, False]

    def test_shape_checks(self, rng):
        params = MlpParams.init(rng, 4, 4)
        with pytest.raises(DimensionError):
            mlp_forward(Tensor(np.zeros((2, 5))), params)
        with pytest.raises(DimensionError):
            MlpParams([Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 2)))], [Tensor(np.zeros(3)), Tensor(np.zeros(2))])

    def test_returns_token_sequence(self, rng):
        seq = TokenSequence(Tensor(rng.normal(size=(4, 4))), (2, 2, 1), StreamTag.GEOMETRY)
        out = mlp_forward(seq, MlpParams.init(rng, 4, 4))
        assert isinstance(out, TokenSequence) and out.grid == (2, 2, 1) and out.length == 4

    def test_gradient_4x8(self, rng):
        params = MlpParams.init(rng, 8, 8)
        x = param(rng, 4, 8)
        w = rng.normal(size=(4, 8))
        backward((mlp_forward(x, params) * Tensor(w)).sum())
        for t in [x] + params.weights + params.biases:
            num = numeric_grad(lambda: float((mlp_forward(Tensor(x.data), params).data * w).sum()), t.data, 1e-4)
            err = np.abs(t.grad - num) / np.maximum(1.0, np.maximum(np.abs(t.grad), np.abs(num)))
            assert err.max() < 1e-4
