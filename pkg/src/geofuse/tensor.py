"""Dense tensors with reverse-mode automatic differentiation.

Every array in the package lives in a :class:`Tensor`.  Operations record
their parents and a backward closure; :func:`backward` walks the recorded
graph in reverse topological order and accumulates gradients by summation.

Leading batch dimensions broadcast the way numpy does, and the backward
rules reduce gradients back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import dataclasses
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ComputeGraph",
    "ContractError",
    "DimensionError",
    "NumericsConfig",
    "Tensor",
    "backward",
    "concat",
    "cross_entropy",
    "from_snapshot_bytes",
    "gelu",
    "layer_norm",
    "load_snapshot",
    "matmul",
    "named_tensors",
    "no_grad",
    "save_snapshot",
    "sigmoid",
    "softmax",
    "to_snapshot_bytes",
    "trace",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


@dataclass(frozen=True)
class NumericsConfig:
    epsilon: float = 1e-6
    ln_epsilon: float = 1e-5
    fd_step: float = 1e-4

    def __post_init__(self):
        for name in ("epsilon", "ln_epsilon", "fd_step"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be strictly positive, got {getattr(self, name)!r}")


DEFAULT_NUMERICS = NumericsConfig()

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference); scoped to the calling thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str, rule) -> "Tensor":
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=track, _parents=parents if track else (), op=op)
        if track:
            out._backward = rule
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            "add",
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            "sub",
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _lift(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            "mul",
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            "div",
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._make(y, (self,), "exp", lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), "log", lambda g: (g / x,))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), "tanh", lambda g: (g * (1.0 - y * y),))

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    # -- reductions and shape ops -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(out), (self,), "sum", rule)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {old} into {shape}") from exc
        return Tensor._make(out, (self,), "reshape", lambda g: (g.reshape(old),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._make(
            np.swapaxes(self.data, a, b), (self,), "swapaxes", lambda g: (np.swapaxes(g, a, b),)
        )

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def rule(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.asarray(self.data[idx]), (self,), "getitem", rule)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return Tensor._make(x @ y, (a, b), "matmul", rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), "concat", rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), "softmax", rule)


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    d = x.data
    # numerically stable on both tails
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return Tensor._make(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = _lift(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    y = 0.5 * d * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return Tensor._make(y, (x,), "gelu", rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, cfg: NumericsConfig = DEFAULT_NUMERICS) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    c = x.shape[-1]
    if c < 1 or gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + cfg.ln_epsilon)
    xhat = xc * inv
    gw = gain.data

    def rule(g):
        dxhat = g * gw
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gw.shape), _unbroadcast(g, bias.shape)

    return Tensor._make(xhat * gw + bias.data, (x, gain, bias), "layer_norm", rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(..., K)`` logits against integer labels."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    n = max(labels.size, 1)
    loss = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def rule(g):
        p = np.exp(logp)
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p / n,)

    return Tensor._make(loss, (logits,), "cross_entropy", rule)


# -- graph ----------------------------------------------------------------------


@dataclass
class ComputeGraph:
    """Recorded operations reachable from ``outputs``, inputs before consumers."""

    nodes: list[Tensor]
    outputs: list[Tensor]

    def index(self, t: Tensor) -> int:
        for i, n in enumerate(self.nodes):
            if n is t:
                return i
        raise KeyError("tensor is not part of this graph")


def trace(*outputs: Tensor) -> ComputeGraph:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return ComputeGraph(nodes=order, outputs=list(outputs))


def backward(output: Tensor, graph: ComputeGraph | None = None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``output``."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if graph is None:
        graph = trace(output)
    for node in graph.nodes:
        node.grad = None
    if not output.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.data.dtype, copy=True)


# -- snapshots ------------------------------------------------------------------


def to_snapshot_bytes(t: Tensor | np.ndarray) -> bytes:
    """rank:u32, extents:u32 each, then float64 row-major, all little-endian."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def from_snapshot_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise ContractError("snapshot truncated before header")
    (rank,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{rank}I", buf, 4)
    offset = 4 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise ContractError(f"snapshot size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save_snapshot(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(to_snapshot_bytes(t))


def load_snapshot(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_snapshot_bytes(fh.read())


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Flatten nested dataclasses, dicts and lists of tensors into dotted paths."""
    out: list[tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        items = [(f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj)]
    elif isinstance(obj, dict):
        items = list(obj.items())
    elif isinstance(obj, (list, tuple)):
        items = [(str(i), v) for i, v in enumerate(obj)]
    else:
        return out
    for key, value in items:
        out.extend(named_tensors(value, f"{prefix}.{key}" if prefix else str(key)))
    return out
