"""Finite-difference oracle for the hand-written backward rules.

Each pipeline id builds a tiny 64-bit instance, reduces its output to a
scalar through fixed random weights, and compares the analytic gradient of
every scalar parameter against a central difference.  Masks are drawn once
and then frozen, so the perturbed forwards see the same discrete choices.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import AttentionParams, MlpParams, cross_attention, mlp_forward
from .backbone import Batch, Model, ModelConfig
from .fusion import (
    Family,
    FusionDims,
    GateParams,
    StreamTag,
    TokenSequence,
    Variant,
    dynamic_pipeline,
    gated_fuse,
    geometry_evidence,
    init_fusion_params,
    static_pipeline,
)
from .masking import MaskMode, MaskPlan, draw_masks, random_mask_set, MaskOutcome
from .tensor import (
    ContractError,
    NumericsConfig,
    Tensor,
    backward,
    cross_entropy,
    layer_norm,
    matmul,
    named_tensors,
    no_grad,
    softmax,
    trace,
)

PIPELINES = (
    "matmul",
    "softmax",
    "layer_norm",
    "mlp",
    "cross_attention",
    "gated_fuse",
    "static",
    "dynamic",
    "backbone",
)
ALIASES = {"mlp_forward": "mlp", "static_pipeline": "static", "dynamic_pipeline": "dynamic", "backbone_loss": "backbone"}


@dataclass(frozen=True)
class MicroConfig:
    """A deliberately small instance; the geometry grid differs from the vision grid so alignment runs."""

    vision_hw: tuple[int, int] = (2, 2)
    frames: int = 2
    geometry_hw: tuple[int, int] = (3, 3)
    width: int = 8
    heads: int = 2
    bottleneck_len: int = 2
    geo_width: int = 6
    prompt_len: int = 3
    batch: int = 2
    n_layers: int = 2
    gamma: float = 0.5
    seed: int = 0

    @property
    def n_vision(self) -> int:
        return self.vision_hw[0] * self.vision_hw[1] * self.frames

    @property
    def n_geometry(self) -> int:
        return self.geometry_hw[0] * self.geometry_hw[1] * self.frames

    def dims(self) -> FusionDims:
        return FusionDims(width=self.width, geo_width=self.geo_width, heads=self.heads,
                          bottleneck_len=self.bottleneck_len)


@dataclass
class GradcheckReport:
    pipeline: str
    max_rel_err: float
    worst_path: str
    n_scalars: int
    tol: float
    passed: bool
    seconds: float = 0.0
    nonfinite_path: str | None = None
    per_parameter: dict[str, float] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "worst_path": self.worst_path,
            "n_scalars": self.n_scalars,
            "tol": self.tol,
            "nonfinite_path": self.nonfinite_path,
        }


@dataclass
class _Problem:
    loss: Callable[[], Tensor]
    params: list[tuple[str, Tensor]]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _seq(rng, n, c, grid=None, tag=StreamTag.VISION) -> TokenSequence:
    return TokenSequence(_param(rng, n, c), grid, tag)


def _build(pipeline: str, micro: MicroConfig) -> _Problem:
    rng = np.random.default_rng([micro.seed, 0x6C])
    c = micro.width
    dt = np.float64
    if pipeline == "matmul":
        a, b = _param(rng, 3, 4), _param(rng, 4, 5)
        w = rng.normal(size=(3, 5))
        return _Problem(lambda: _weighted_sum(matmul(a, b), w), [("a", a), ("b", b)])
    if pipeline == "softmax":
        x = _param(rng, 3, 5, scale=2.0)
        w = rng.normal(size=(3, 5))
        return _Problem(lambda: _weighted_sum(softmax(x, axis=-1), w), [("x", x)])
    if pipeline == "layer_norm":
        x, gain, bias = _param(rng, 4, c), _param(rng, c), _param(rng, c)
        w = rng.normal(size=(4, c))
        return _Problem(lambda: _weighted_sum(layer_norm(x, gain, bias), w),
                        [("x", x), ("gain", gain), ("bias", bias)])
    if pipeline == "mlp":
        x = _param(rng, 4, c)
        params = MlpParams.init(rng, c, c, 2 * c, dt)
        _jitter_biases(rng, params)
        w = rng.normal(size=(4, c))
        return _Problem(lambda: _weighted_sum(mlp_forward(x, params), w),
                        [("x", x)] + named_tensors(params, "mlp"))
    if pipeline == "cross_attention":
        q, kv = _param(rng, 3, c), _param(rng, 5, c)
        params = AttentionParams.init(rng, c, micro.heads, dt)
        w = rng.normal(size=(3, c))
        return _Problem(lambda: _weighted_sum(cross_attention(q, kv, params).context, w),
                        [("queries", q), ("keys_values", kv)] + named_tensors(params, "attn"))
    if pipeline == "gated_fuse":
        grid = (*micro.vision_hw, micro.frames)
        v, g = _seq(rng, micro.n_vision, c, grid), _seq(rng, micro.n_vision, c, grid, StreamTag.GEOMETRY)
        params = GateParams.init(rng, c, dt)
        _jitter_gate(rng, params)
        w = rng.normal(size=(micro.n_vision, c))
        return _Problem(lambda: _weighted_sum(gated_fuse(v, g, params)[0].fused.tokens, w),
                        [("f_v", v.tokens), ("f_g", g.tokens)] + named_tensors(params, "gate"))
    if pipeline in ("static", "dynamic"):
        return _fusion_problem(pipeline, micro, rng)
    if pipeline == "backbone":
        return _backbone_problem(micro, rng)
    raise ContractError(f"unknown gradcheck pipeline {pipeline!r}; choose from {', '.join(PIPELINES)}")


def _jitter_biases(rng, params: MlpParams) -> None:
    # nonzero biases so their gradients are exercised away from the symmetric init
    for b in params.biases:
        b.data += rng.normal(0.0, 0.1, size=b.shape)


def _jitter_gate(rng, params: GateParams) -> None:
    for t in (params.b_g, params.ln_v_gain, params.ln_v_bias, params.ln_g_gain, params.ln_g_bias):
        t.data += rng.normal(0.0, 0.1, size=t.shape)


def _fusion_problem(pipeline: str, micro: MicroConfig, rng) -> _Problem:
    c = micro.width
    v_grid = (*micro.vision_hw, micro.frames)
    g_grid = (*micro.geometry_hw, micro.frames)
    f_v = _seq(rng, micro.n_vision, c, v_grid)
    f_g = _seq(rng, micro.n_geometry, micro.geo_width, g_grid, StreamTag.GEOMETRY)
    family = Family.STATIC if pipeline == "static" else Family.DYNAMIC
    params = init_fusion_params(rng, micro.dims(), Variant.A, family, np.float64)
    for mlp in (params.geo_proj, params.geo_embed, params.align):
        if mlp is not None:
            _jitter_biases(rng, mlp)
    _jitter_gate(rng, params.gate)
    mask_rng = np.random.default_rng([micro.seed, 0x6D])
    inputs = [("f_v", f_v.tokens), ("f_g", f_g.tokens)]

    if family is Family.STATIC:
        plan = MaskPlan(MaskMode.RANDOM, micro.gamma, 1.0)
        outcome = MaskOutcome.build(micro.n_vision, True, random_mask_set(micro.n_vision, micro.gamma, mask_rng))
        w = rng.normal(size=(micro.n_vision, c))
        return _Problem(lambda: _weighted_sum(static_pipeline(f_v, f_g, plan, params, outcome=outcome).fused.tokens, w),
                        inputs + named_tensors(params, "fusion"))

    f_p = _seq(rng, micro.prompt_len, c, None, StreamTag.PROMPT)
    plan = MaskPlan(MaskMode.TOPK, micro.gamma, 1.0)
    with no_grad():
        scores = geometry_evidence(f_g, f_p, params, micro.vision_hw).relevance.s
    outcome = draw_masks(plan, micro.n_vision, [mask_rng], scores[None])[0]
    w = rng.normal(size=(micro.n_vision + micro.bottleneck_len, c))

    def loss():
        fused = dynamic_pipeline(f_v, f_g, f_p, plan, params, outcome=outcome)
        return (_weighted_sum(fused.fused.tokens, w[:micro.n_vision])
                + _weighted_sum(fused.appended_global.tokens, w[micro.n_vision:]))

    return _Problem(loss, inputs + [("f_p", f_p.tokens)] + named_tensors(params, "fusion"))


def _backbone_problem(micro: MicroConfig, rng) -> _Problem:
    config = ModelConfig(variant=Variant.A, family=Family.DYNAMIC, dims=micro.dims(), n_layers=micro.n_layers,
                         vision_grid=(*micro.vision_hw, micro.frames), geometry_grid=micro.geometry_hw,
                         dtype="float64")
    model = Model.init(config, micro.seed)
    for _, p in model.named_parameters():
        # break the zero/one initial symmetry of biases and norm gains
        if p.ndim == 1:
            p.data += rng.normal(0.0, 0.1, size=p.shape)
    b = micro.batch
    batch = Batch(
        vision=rng.normal(size=(b, micro.n_vision, micro.width)),
        geometry=rng.normal(size=(b, micro.n_geometry, micro.geo_width)),
        prompt=rng.normal(size=(b, micro.prompt_len, micro.width)),
        labels=np.arange(b) % 2,
    )
    plan = MaskPlan(MaskMode.TOPK, micro.gamma, 1.0)
    mask_rngs = [np.random.default_rng([micro.seed, 0x6E, i]) for i in range(b)]
    with no_grad():
        _, fused = model.forward(batch, plan, mask_rngs)
    outcomes = fused.masks
    return _Problem(lambda: cross_entropy(model.forward(batch, plan, outcomes=outcomes)[0], batch.labels),
                    model.named_parameters())


def _leaf_names(params) -> dict[int, str]:
    return {id(t): name for name, t in params}


def _nonfinite_path(loss: Tensor, names: dict[int, str]) -> str | None:
    """Describe the earliest recorded node holding a NaN or inf, walking back to a named leaf."""
    graph = trace(loss)
    for node in graph.nodes:
        if np.all(np.isfinite(node.data)):
            continue
        chain = [node.op]
        cur = node
        while cur._parents:
            nxt = next((p for p in cur._parents if not np.all(np.isfinite(p.data))), cur._parents[0])
            cur = nxt
            chain.append(names.get(id(cur), cur.op))
        return " <- ".join(chain)
    return None


def gradcheck(pipeline: str, micro: MicroConfig | None = None, tol: float = 1e-4,
              cfg: NumericsConfig | None = None) -> GradcheckReport:
    """Compare analytic and central-difference gradients for one pipeline id.

    The report passes iff every scalar's relative error
    ``|a - n| / max(1, |a|, |n|)`` is below ``tol`` and no node went non-finite.
    """
    pipeline = ALIASES.get(pipeline, pipeline)
    micro = micro or MicroConfig()
    h = (cfg or NumericsConfig()).fd_step
    start = time.perf_counter()
    problem = _build(pipeline, micro)
    names = _leaf_names(problem.params)
    for _, t in problem.params:
        if t.data.dtype != np.float64:
            raise ContractError(f"gradcheck needs 64-bit parameters, got {t.data.dtype}")

    loss = problem.loss()
    bad = _nonfinite_path(loss, names)
    if bad is not None:
        return GradcheckReport(pipeline, math.inf, bad.split(" <- ")[-1], 0, tol, False,
                               time.perf_counter() - start, bad)
    backward(loss)
    analytic = {}
    for name, t in problem.params:
        g = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if not np.all(np.isfinite(g)):
            return GradcheckReport(pipeline, math.inf, name, 0, tol, False, time.perf_counter() - start,
                                   f"grad({name})")
        analytic[name] = g

    worst, worst_path, count = 0.0, "", 0
    per_param: dict[str, float] = {}
    with no_grad():
        for name, t in problem.params:
            flat = t.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            p_worst = 0.0
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                up = float(problem.loss().data)
                flat[j] = old - h
                down = float(problem.loss().data)
                flat[j] = old
                numeric = (up - down) / (2.0 * h)
                if not (math.isfinite(up) and math.isfinite(down)):
                    return GradcheckReport(pipeline, math.inf, f"{name}[{j}]", count, tol, False,
                                           time.perf_counter() - start, f"perturbed loss at {name}[{j}]")
                err = relative_error(float(a_flat[j]), numeric)
                count += 1
                p_worst = max(p_worst, err)
                if err > worst or not worst_path:
                    worst, worst_path = err, f"{name}[{j}]" if flat.size > 1 else name
            per_param[name] = p_worst
    return GradcheckReport(pipeline, worst, worst_path, count, tol, worst < tol,
                           time.perf_counter() - start, None, per_param)


def gradcheck_suite(tol: float = 1e-4, micro: MicroConfig | None = None,
                    pipelines=PIPELINES) -> list[GradcheckReport]:
    return [gradcheck(p, micro, tol) for p in pipelines]
