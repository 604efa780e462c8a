"""Multi-head cross-attention and token-wise MLP blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, gelu, softmax


def _tensor_of(x) -> Tensor:
    # TokenSequence and friends carry their matrix in ``.tokens``
    return getattr(x, "tokens", x)


def init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64, scale: float = 1.0) -> Tensor:
    w = rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype)
    return Tensor(w, requires_grad=True)


def zeros_param(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


@dataclass
class AttentionParams:
    """Query/key/value/output projections, each ``C x C``.

    Column block ``k*d:(k+1)*d`` of ``wq``/``wk``/``wv`` is head ``k``'s
    ``C -> C/h`` projection.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int = 4

    def __post_init__(self):
        c = self.width
        if self.heads < 1 or c % self.heads:
            raise DimensionError(f"channel width {c} not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(c, c)}")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, heads: int = 4, dtype=np.float64) -> "AttentionParams":
        return cls(*(init_matrix(rng, width, width, dtype) for _ in range(4)), heads=heads)


@dataclass
class AttentionRecord:
    probs: Tensor  # (..., h, L_q, L_k)
    context: Tensor  # (..., L_q, C)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, width = x.shape
    return x.reshape(*lead, length, heads, width // heads).swapaxes(-2, -3)


def cross_attention(queries, keys_values, params: AttentionParams) -> AttentionRecord:
    """Scaled dot-product attention of ``queries`` over ``keys_values``.

    Both inputs are ``(..., L, C)``; leading dimensions broadcast, so a
    parameter tensor of queries can attend into a batch of sequences.
    """
    q_in, kv_in = _tensor_of(queries), _tensor_of(keys_values)
    c = params.width
    if q_in.shape[-1] != c or kv_in.shape[-1] != c:
        raise DimensionError(
            f"cross_attention channel mismatch: queries {q_in.shape}, keys/values {kv_in.shape}, params width {c}"
        )
    h = params.heads
    q = _split_heads(q_in @ params.wq, h)
    k = _split_heads(kv_in @ params.wk, h)
    v = _split_heads(kv_in @ params.wv, h)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(c // h))
    probs = softmax(scores, axis=-1)
    ctx = probs @ v
    *lead, _, lq, d = ctx.shape
    merged = ctx.swapaxes(-2, -3).reshape(*lead, lq, h * d)
    return AttentionRecord(probs=probs, context=merged @ params.wo)


@dataclass
class MlpParams:
    """Linear layers applied token-wise with GELU between consecutive layers."""

    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("MLP needs one bias per weight and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i}: input width {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, in_width: int, out_width: int, hidden: int | None = None,
             dtype=np.float64) -> "MlpParams":
        """``hidden=None`` means ``2 * out_width``; ``hidden=0`` gives one linear layer."""
        if hidden is None:
            hidden = 2 * out_width
        dims = [in_width, hidden, out_width] if hidden else [in_width, out_width]
        weights = [init_matrix(rng, a, b, dtype) for a, b in zip(dims[:-1], dims[1:])]
        biases = [zeros_param((b,), dtype) for b in dims[1:]]
        return cls(weights, biases)


def mlp_forward(x, params: MlpParams):
    """Apply the MLP to every token; returns the same container type it was given."""
    t = _tensor_of(x)
    if t.shape[-1] != params.in_width:
        raise DimensionError(f"mlp input width {t.shape[-1]} does not match weight {params.weights[0].shape}")
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        t = t @ w + b
        if i < n - 1:
            t = gelu(t)
    return x.with_tokens(t) if hasattr(x, "tokens") else t
