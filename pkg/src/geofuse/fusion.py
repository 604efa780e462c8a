"""Vision/geometry token fusion pipelines.

Four ways of handing geometry tokens to the backbone live here:

* additive fusion, ``F = F_V + MLP(Reshape(F_G))``;
* query-transformer fusion, where learnable bottleneck tokens read the
  prompt, probe the geometry tokens, and the resulting compact evidence
  ``Z_G`` is concatenated after the vision tokens;
* the static gated pipeline (mask the vision tokens, project the
  resampled geometry, mix both streams with a sigmoid gate);
* the dynamic gated pipeline, which additionally ranks geometry positions
  by the attention they receive, masks the matching vision tokens,
  redistributes ``Z_G`` to every position by cross-attention and appends
  ``Z_G`` after the gated output.

All functions accept unbatched ``(L, C)`` or batched ``(B, L, C)`` tokens.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
import numpy as np

from .attention import (
    AttentionParams,
    AttentionRecord,
    MlpParams,
    cross_attention,
    init_matrix,
    mlp_forward,
    ones_param,
    zeros_param,
)
from .masking import (
    DISABLED,
    MaskMode,
    MaskOutcome,
    MaskPlan,
    RelevanceScore,
    apply_mask,
    draw_masks,
    relevance_scores,
)
from .tensor import DEFAULT_NUMERICS, ContractError, DimensionError, NumericsConfig, Tensor, concat, layer_norm, sigmoid


class StreamTag(str, enum.Enum):
    VISION = "vision"
    GEOMETRY = "geometry"
    PROMPT = "prompt"
    BOTTLENECK = "bottleneck"
    FUSED = "fused"


Grid = tuple[int, int, int]  # (H, W, T); tokens are ordered t-major, then h, then w


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tensor
    grid: Grid | None = None
    tag: StreamTag = StreamTag.VISION

    def __post_init__(self):
        if not isinstance(self.tokens, Tensor):
            object.__setattr__(self, "tokens", Tensor(self.tokens))
        if self.tokens.ndim not in (2, 3):
            raise DimensionError(f"token matrix must be (L, C) or (B, L, C), got {self.tokens.shape}")
        if self.grid is not None:
            h, w, t = self.grid
            if h * w * t != self.length:
                raise DimensionError(f"grid {self.grid} does not cover {self.length} tokens")

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def with_tokens(self, tokens: Tensor, **changes) -> "TokenSequence":
        return replace(self, tokens=tokens, **changes)


@dataclass
class GateTensor:
    alpha: Tensor
    v_normed: Tensor
    g_normed: Tensor


@dataclass
class FusedSequence:
    fused: TokenSequence
    grid: Grid
    appended_global: TokenSequence | None = None
    gate: GateTensor | None = None
    relevance: RelevanceScore | None = None
    attention: AttentionRecord | None = None
    masks: list[MaskOutcome] | None = None

    @property
    def length(self) -> int:
        extra = self.appended_global.length if self.appended_global is not None else 0
        return self.fused.length + extra


# -- parameters --------------------------------------------------------------------


@dataclass
class BottleneckParams:
    tokens: Tensor  # (L_B, C)
    attn1: AttentionParams
    residual: bool = True  # F_B = B + CrossAttn_1(B, F_P); False gives the bare attention output

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(f"bottleneck tokens must be (L_B >= 1, C), got {self.tokens.shape}")


@dataclass
class GateParams:
    w_g: Tensor  # (2C, C)
    b_g: Tensor  # (C,)
    ln_v_gain: Tensor
    ln_v_bias: Tensor
    ln_g_gain: Tensor
    ln_g_bias: Tensor

    def __post_init__(self):
        c = self.b_g.shape[0]
        if self.w_g.shape != (2 * c, c):
            raise DimensionError(f"gate weight {self.w_g.shape} must be {(2 * c, c)}")

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, dtype=np.float64) -> "GateParams":
        return cls(
            w_g=init_matrix(rng, 2 * width, width, dtype),
            b_g=zeros_param((width,), dtype),
            ln_v_gain=ones_param((width,), dtype),
            ln_v_bias=zeros_param((width,), dtype),
            ln_g_gain=ones_param((width,), dtype),
            ln_g_bias=zeros_param((width,), dtype),
        )


@dataclass
class FusionParams:
    """Every learnable piece a pipeline may use; unused pieces stay ``None``."""

    geo_proj: MlpParams | None = None  # additive / static: C_G -> C after resampling
    bottleneck: BottleneckParams | None = None
    geo_embed: MlpParams | None = None  # query path: C_G -> C
    align: MlpParams | None = None  # query path: C -> C after resampling, only when grids differ
    attn2: AttentionParams | None = None
    attn3: AttentionParams | None = None
    zg_proj: MlpParams | None = None  # concatenation path: C -> C
    gate: GateParams | None = None


# -- building blocks -----------------------------------------------------------------


def _interp_weights(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape ``(dst, src)``."""
    w = np.zeros((dst, src))
    if src == 1:
        w[:, 0] = 1.0
        return w
    for i in range(dst):
        pos = 0.0 if dst == 1 else i * (src - 1) / (dst - 1)
        lo = min(int(np.floor(pos)), src - 2)
        frac = pos - lo
        w[i, lo] += 1.0 - frac
        w[i, lo + 1] += frac
    return w


def resample_matrix(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Per-frame bilinear resampling ``(H_d*W_d, H_s*W_s)`` for row-major (h, w) tokens."""
    return np.kron(_interp_weights(src_hw[0], dst_hw[0]), _interp_weights(src_hw[1], dst_hw[1]))


def interp_align(f_g: TokenSequence, target: tuple[int, int]) -> TokenSequence:
    if f_g.grid is None:
        raise ContractError("interp_align needs a token grid")
    h, w, t = f_g.grid
    if (h, w) == tuple(target):
        return f_g
    r = resample_matrix((h, w), target)
    x = f_g.tokens
    lead = x.shape[:-2]
    c = x.shape[-1]
    frames = x.reshape(*lead, t, h * w, c)
    out = Tensor(r.astype(x.dtype)) @ frames
    return f_g.with_tokens(out.reshape(*lead, t * target[0] * target[1], c), grid=(target[0], target[1], t))


def _check_frames(f_v: TokenSequence, f_g: TokenSequence) -> None:
    if f_v.grid is None or f_g.grid is None:
        raise ContractError("vision and geometry tokens need grids")
    if f_v.grid[2] != f_g.grid[2]:
        raise ContractError(f"frame count mismatch: vision T={f_v.grid[2]}, geometry T={f_g.grid[2]}")


def additive_fuse(f_v: TokenSequence, f_g: TokenSequence, proj: MlpParams | Tensor) -> FusedSequence:
    """``F = F_V + proj(resample(F_G))``; ``proj`` may also be a fixed embedding matrix."""
    _check_frames(f_v, f_g)
    aligned = interp_align(f_g, f_v.grid[:2])
    if isinstance(proj, Tensor):
        geo = aligned.tokens @ proj
    else:
        geo = mlp_forward(aligned.tokens, proj)
    fused = f_v.tokens + geo
    return FusedSequence(fused=TokenSequence(fused, f_v.grid, StreamTag.FUSED), grid=f_v.grid)


def bottleneck_summarize(params: BottleneckParams, f_p: TokenSequence) -> TokenSequence:
    """``F_B = B + CrossAttn_1(B, F_P)``.

    Without the query residual every bottleneck row is a convex mix of the
    same few prompt values, so the rows coincide and so do the rows of
    ``Z_G``; ``params.residual = False`` restores the bare attention output.
    """
    rec = cross_attention(params.tokens, f_p.tokens, params.attn1)
    out = params.tokens + rec.context if params.residual else rec.context
    return TokenSequence(out, None, StreamTag.BOTTLENECK)


def geometry_query(f_b: TokenSequence, f_g_aligned: TokenSequence, attn2: AttentionParams):
    if f_g_aligned.width != f_b.width:
        raise DimensionError(f"geometry width {f_g_aligned.width} must be projected to {f_b.width} first")
    rec = cross_attention(f_b.tokens, f_g_aligned.tokens, attn2)
    return TokenSequence(rec.context, None, StreamTag.GEOMETRY), rec


def qformer_concat_fuse(f_v: TokenSequence, z_g: TokenSequence, proj: MlpParams | None) -> FusedSequence:
    """``F = [F_V, proj(Z_G)]`` along the token axis; ``proj=None`` appends ``Z_G`` as is."""
    z = z_g.tokens if proj is None else mlp_forward(z_g.tokens, proj)
    if z.ndim < f_v.tokens.ndim:
        z = z + Tensor(np.zeros(f_v.tokens.shape[:-2] + z.shape, dtype=z.dtype))
    fused = concat([f_v.tokens, z], axis=-2)
    return FusedSequence(fused=TokenSequence(fused, None, StreamTag.FUSED), grid=f_v.grid)


def retrieve_geo_features(f_g_prime: TokenSequence, z_g: TokenSequence, attn3: AttentionParams) -> TokenSequence:
    rec = cross_attention(f_g_prime.tokens, z_g.tokens, attn3)
    return TokenSequence(rec.context, f_g_prime.grid, StreamTag.GEOMETRY)


def gated_fuse(f_v_masked: TokenSequence, f_g_tilde: TokenSequence, params: GateParams,
               cfg: NumericsConfig = DEFAULT_NUMERICS) -> tuple[FusedSequence, GateTensor]:
    """Token-and-channel-wise convex mix of the layer-normed streams."""
    if f_v_masked.tokens.shape[-2:] != f_g_tilde.tokens.shape[-2:]:
        raise DimensionError(f"stream shapes differ: {f_v_masked.tokens.shape} vs {f_g_tilde.tokens.shape}")
    v = layer_norm(f_v_masked.tokens, params.ln_v_gain, params.ln_v_bias, cfg)
    g = layer_norm(f_g_tilde.tokens, params.ln_g_gain, params.ln_g_bias, cfg)
    if v.ndim != g.ndim:
        # one stream may be unbatched; align for the channel concat
        target = v.shape if v.ndim > g.ndim else g.shape
        zero = Tensor(np.zeros(target, dtype=v.dtype))
        v, g = v + zero, g + zero
    alpha = sigmoid(concat([v, g], axis=-1) @ params.w_g + params.b_g)
    # same convex mix as alpha*v + (1-alpha)*g, but exact when the streams coincide
    fused = g + alpha * (v - g)
    grid = f_v_masked.grid or f_g_tilde.grid
    gate = GateTensor(alpha=alpha, v_normed=v, g_normed=g)
    return FusedSequence(fused=TokenSequence(fused, grid, StreamTag.FUSED), grid=grid, gate=gate), gate


# -- pipelines ----------------------------------------------------------------------------


def _resolve_masks(plan: MaskPlan, n: int, rng, outcome, batch: int | None, scores=None) -> list[MaskOutcome]:
    if outcome is not None:
        outs = [outcome] if isinstance(outcome, MaskOutcome) else list(outcome)
    elif plan.disabled:
        outs = [MaskOutcome.identity(n)] * (batch or 1)
    else:
        outs = draw_masks(plan, n, rng, scores)
    if batch is not None and len(outs) != batch:
        raise DimensionError(f"{len(outs)} mask outcomes for a batch of {batch}")
    return outs


def _batch_of(t: Tensor) -> int | None:
    return t.shape[0] if t.ndim == 3 else None


def static_pipeline(f_v: TokenSequence, f_g: TokenSequence, mask: MaskPlan, params: FusionParams, rng=None,
                    outcome=None, cfg: NumericsConfig = DEFAULT_NUMERICS) -> FusedSequence:
    """Mask vision tokens, project resampled geometry, gate-mix the two streams."""
    _check_frames(f_v, f_g)
    if mask.mode is MaskMode.TOPK:
        raise ContractError("the static pipeline has no attention to rank positions; use random masking")
    masks = _resolve_masks(mask, f_v.length, rng, outcome, _batch_of(f_v.tokens))
    v_tilde = apply_mask(f_v, masks)
    g_tilde = mlp_forward(interp_align(f_g, f_v.grid[:2]), params.geo_proj)
    fused, _ = gated_fuse(v_tilde, g_tilde, params.gate, cfg)
    fused.masks = masks
    return fused


@dataclass
class GeometryEvidence:
    f_b: TokenSequence
    f_g_hat: TokenSequence  # projected (and aligned, when requested) geometry tokens
    z_g: TokenSequence
    attention: AttentionRecord
    relevance: RelevanceScore


def geometry_evidence(f_g: TokenSequence, f_p: TokenSequence, params: FusionParams, vision_hw=None,
                      cfg: NumericsConfig = DEFAULT_NUMERICS) -> GeometryEvidence:
    """Bottleneck summary of the prompt, then its query into the geometry tokens.

    With ``vision_hw`` the projected geometry is first resampled to the
    vision grid (and passed through the alignment MLP when the grids
    differ) so attention columns index vision positions one-to-one.
    """
    f_b = bottleneck_summarize(params.bottleneck, f_p)
    f_g_hat = mlp_forward(f_g, params.geo_embed)
    if vision_hw is not None and tuple(vision_hw) != f_g.grid[:2]:
        f_g_hat = mlp_forward(interp_align(f_g_hat, vision_hw), params.align)
    z_g, rec = geometry_query(f_b, f_g_hat, params.attn2)
    return GeometryEvidence(f_b, f_g_hat, z_g, rec, relevance_scores(rec, cfg))


def dynamic_pipeline(f_v: TokenSequence, f_g: TokenSequence, f_p: TokenSequence, mask: MaskPlan,
                     params: FusionParams, rng=None, outcome=None,
                     cfg: NumericsConfig = DEFAULT_NUMERICS) -> FusedSequence:
    """Relevance-masked, gated fusion with the compact evidence appended."""
    _check_frames(f_v, f_g)
    ev = geometry_evidence(f_g, f_p, params, f_v.grid[:2], cfg)
    masks = _resolve_masks(mask, f_v.length, rng, outcome, _batch_of(f_v.tokens), ev.relevance.s)
    v_tilde = apply_mask(f_v, masks)
    g_tilde = retrieve_geo_features(ev.f_g_hat, ev.z_g, params.attn3)
    fused, gate = gated_fuse(v_tilde, g_tilde, params.gate, cfg)
    fused.appended_global = ev.z_g
    fused.relevance = ev.relevance
    fused.attention = ev.attention
    fused.masks = masks
    return fused


# -- ablation wiring -------------------------------------------------------------------


class Family(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class Variant(str, enum.Enum):
    A = "a"  # masking + gated fusion
    B = "b"  # masking + original fusion
    C = "c"  # masking, geometry delivered without a learned fusion module
    D = "d"  # gated fusion only
    E = "e"  # original fusion only
    F = "f"  # no geometry branch

    @property
    def masked(self) -> bool:
        return self in (Variant.A, Variant.B, Variant.C)

    @property
    def fusion(self) -> str:
        return {"a": "gated", "b": "original", "c": "identity", "d": "gated", "e": "original", "f": "none"}[self.value]


def default_mask_mode(family: Family) -> MaskMode:
    return MaskMode.RANDOM if Family(family) is Family.STATIC else MaskMode.TOPK


@dataclass(frozen=True)
class FusionDims:
    width: int = 32
    geo_width: int = 6
    heads: int = 4
    bottleneck_len: int = 8
    proj_hidden: int = 0  # additive / static projection: one linear layer
    mlp_hidden: int | None = None  # query-path MLPs: 2 * width
    bottleneck_residual: bool = True


def identity_embedding(geo_width: int, width: int, dtype=np.float64) -> Tensor:
    """Fixed ``C_G -> C`` map writing geometry into the trailing channels."""
    if geo_width > width:
        raise DimensionError(f"cannot embed {geo_width} geometry channels into width {width}")
    e = np.zeros((geo_width, width), dtype=dtype)
    e[np.arange(geo_width), width - geo_width + np.arange(geo_width)] = 1.0
    return Tensor(e)


def init_fusion_params(rng: np.random.Generator, dims: FusionDims, variant: Variant, family: Family,
                       dtype=np.float64) -> FusionParams:
    variant, family = Variant(variant), Family(family)
    c = dims.width
    p = FusionParams()
    if variant.fusion == "none":
        return p
    if family is Family.STATIC:
        if variant.fusion in ("gated", "original"):
            p.geo_proj = MlpParams.init(rng, dims.geo_width, c, dims.proj_hidden, dtype)
        if variant.fusion == "gated":
            p.gate = GateParams.init(rng, c, dtype)
        return p
    b = rng.normal(0.0, 1.0, size=(dims.bottleneck_len, c)).astype(dtype)
    p.bottleneck = BottleneckParams(Tensor(b, requires_grad=True), AttentionParams.init(rng, c, dims.heads, dtype),
                                    dims.bottleneck_residual)
    p.geo_embed = MlpParams.init(rng, dims.geo_width, c, dims.mlp_hidden, dtype)
    p.align = MlpParams.init(rng, c, c, dims.mlp_hidden, dtype)
    p.attn2 = AttentionParams.init(rng, c, dims.heads, dtype)
    if variant.fusion == "gated":
        p.attn3 = AttentionParams.init(rng, c, dims.heads, dtype)
        p.gate = GateParams.init(rng, c, dtype)
    elif variant.fusion == "original":
        p.zg_proj = MlpParams.init(rng, c, c, dims.mlp_hidden, dtype)
    return p


def run_fusion(variant: Variant, family: Family, f_v: TokenSequence, f_g: TokenSequence, f_p: TokenSequence,
               params: FusionParams, plan: MaskPlan = DISABLED, rng=None, outcome=None,
               cfg: NumericsConfig = DEFAULT_NUMERICS) -> FusedSequence:
    """Dispatch one ablation variant.  Unmasked variants ignore ``plan``."""
    variant, family = Variant(variant), Family(family)
    if not variant.masked:
        plan, outcome = DISABLED, None
    batch = _batch_of(f_v.tokens)
    if variant.fusion == "none":
        return FusedSequence(fused=f_v.with_tokens(f_v.tokens, tag=StreamTag.FUSED), grid=f_v.grid,
                             masks=[MaskOutcome.identity(f_v.length)] * (batch or 1))
    if family is Family.STATIC:
        if variant.fusion == "gated":
            return static_pipeline(f_v, f_g, plan, params, rng, outcome, cfg)
        masks = _resolve_masks(plan, f_v.length, rng, outcome, batch)
        v_tilde = apply_mask(f_v, masks)
        proj = params.geo_proj if variant.fusion == "original" else identity_embedding(
            f_g.width, f_v.width, f_v.tokens.dtype)
        out = additive_fuse(v_tilde, f_g, proj)
        out.masks = masks
        return out
    if variant.fusion == "gated":
        return dynamic_pipeline(f_v, f_g, f_p, plan, params, rng, outcome, cfg)
    # the plain query-transformer baseline probes geometry at its own resolution
    align = f_v.grid[:2] if variant.masked else None
    ev = geometry_evidence(f_g, f_p, params, align, cfg)
    masks = _resolve_masks(plan, f_v.length, rng, outcome, batch, ev.relevance.s)
    v_tilde = apply_mask(f_v, masks)
    out = qformer_concat_fuse(v_tilde, ev.z_g, params.zg_proj if variant.fusion == "original" else None)
    out.relevance = ev.relevance if align is not None else None
    out.attention = ev.attention
    out.masks = masks
    return out
