"""Toy transformer encoder standing in for the language-model backbone."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, MlpParams, cross_attention, init_matrix, mlp_forward, ones_param, zeros_param
from .fusion import (
    Family,
    FusedSequence,
    FusionDims,
    FusionParams,
    StreamTag,
    TokenSequence,
    Variant,
    init_fusion_params,
    run_fusion,
)
from .masking import DISABLED, MaskPlan
from .synthdata import Sample
from .tensor import DEFAULT_NUMERICS, DimensionError, NumericsConfig, Tensor, concat, layer_norm, named_tensors, no_grad

TAG_INDEX = {tag: i for i, tag in enumerate(StreamTag)}


@dataclass
class EncoderBlock:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp: MlpParams


@dataclass
class BackboneParams:
    type_embedding: Tensor  # (n_tags, C)
    blocks: list[EncoderBlock]
    ln_f_gain: Tensor
    ln_f_bias: Tensor
    head_w: Tensor  # (C, 2)
    head_b: Tensor

    @property
    def width(self) -> int:
        return self.type_embedding.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, heads: int = 4, n_layers: int = 2,
             mlp_hidden: int | None = None, dtype=np.float64) -> "BackboneParams":
        if n_layers < 1:
            raise DimensionError("the backbone needs at least one encoder block")
        blocks = [
            EncoderBlock(
                ones_param((width,), dtype), zeros_param((width,), dtype),
                AttentionParams.init(rng, width, heads, dtype),
                ones_param((width,), dtype), zeros_param((width,), dtype),
                MlpParams.init(rng, width, width, mlp_hidden, dtype),
            )
            for _ in range(n_layers)
        ]
        type_emb = Tensor(rng.normal(0.0, 0.02, size=(len(StreamTag), width)).astype(dtype), requires_grad=True)
        return cls(
            type_embedding=type_emb,
            blocks=blocks,
            ln_f_gain=ones_param((width,), dtype),
            ln_f_bias=zeros_param((width,), dtype),
            head_w=init_matrix(rng, width, 2, dtype, scale=0.1),
            head_b=zeros_param((2,), dtype),
        )


def grid_positional_encoding(grid: tuple[int, int, int], width: int) -> np.ndarray:
    """Sinusoids over (t, h, w), one third of the channels per axis, t-major token order."""
    h, w, t = grid
    per_axis = (width // 3) // 2 * 2
    coords = np.stack(np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.zeros((h * w * t, width))
    freqs = 1.0 / (10.0 ** (np.arange(per_axis // 2) * 2.0 / max(per_axis, 1)))
    for axis in range(3):
        angles = coords[:, axis:axis + 1] * freqs[None]
        base = axis * per_axis
        out[:, base:base + per_axis:2] = np.sin(angles)
        out[:, base + 1:base + per_axis:2] = np.cos(angles)
    return out


def backbone_forward(fused: FusedSequence, prompt: TokenSequence, params: BackboneParams,
                     cfg: NumericsConfig = DEFAULT_NUMERICS) -> Tensor:
    """Encode ``[fused, appended_global?, prompt]`` and classify the mean-pooled sequence."""
    c = params.width
    parts = [fused.fused.tokens]
    if fused.appended_global is not None:
        parts.append(fused.appended_global.tokens)
    parts.append(prompt.tokens)
    for p in parts:
        if p.shape[-1] != c:
            raise DimensionError(f"backbone width {c} but got token block of shape {p.shape}")
    batch_shape = next((p.shape[:-2] for p in parts if p.ndim == 3), ())
    if batch_shape:
        parts = [p if p.ndim == 3 else p + Tensor(np.zeros(batch_shape + p.shape, dtype=p.dtype)) for p in parts]
    x = concat(parts, axis=-2)

    n_grid = int(np.prod(fused.grid))
    n_fused = fused.fused.length
    n_global = fused.appended_global.length if fused.appended_global is not None else 0
    tags = (
        [TAG_INDEX[StreamTag.FUSED]] * n_grid
        + [TAG_INDEX[StreamTag.BOTTLENECK]] * (n_fused - n_grid + n_global)
        + [TAG_INDEX[StreamTag.PROMPT]] * prompt.length
    )
    pos = np.zeros((len(tags), c), dtype=x.dtype)
    pos[:n_grid] = grid_positional_encoding(fused.grid, c)
    x = x + Tensor(pos) + params.type_embedding[np.asarray(tags)]

    for blk in params.blocks:
        y = layer_norm(x, blk.ln1_gain, blk.ln1_bias, cfg)
        x = x + cross_attention(y, y, blk.attn).context
        y = layer_norm(x, blk.ln2_gain, blk.ln2_bias, cfg)
        x = x + mlp_forward(y, blk.mlp)
    x = layer_norm(x, params.ln_f_gain, params.ln_f_bias, cfg)
    pooled = x.mean(axis=-2)
    return pooled @ params.head_w + params.head_b


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.A
    family: Family = Family.DYNAMIC
    dims: FusionDims = field(default_factory=FusionDims)
    n_layers: int = 2
    backbone_hidden: int | None = None
    vision_grid: tuple[int, int, int] = (4, 4, 4)
    geometry_grid: tuple[int, int] = (4, 4)
    dtype: str = "float64"


@dataclass
class Batch:
    vision: np.ndarray
    geometry: np.ndarray
    prompt: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_samples(cls, samples: list[Sample], dtype=np.float64) -> "Batch":
        return cls(
            vision=np.stack([s.vision for s in samples]).astype(dtype),
            geometry=np.stack([s.geometry for s in samples]).astype(dtype),
            prompt=np.stack([s.prompt for s in samples]).astype(dtype),
            labels=np.array([s.label for s in samples], dtype=np.int64),
        )

    def take(self, idx) -> "Batch":
        return Batch(self.vision[idx], self.geometry[idx], self.prompt[idx], self.labels[idx])

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Model:
    config: ModelConfig
    fusion: FusionParams
    backbone: BackboneParams

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng([int(seed), 7])
        dtype = np.dtype(config.dtype)
        fusion = init_fusion_params(rng, config.dims, config.variant, config.family, dtype)
        backbone = BackboneParams.init(rng, config.dims.width, config.dims.heads, config.n_layers,
                                       config.backbone_hidden, dtype)
        return cls(config, fusion, backbone)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return named_tensors(self.fusion, "fusion") + named_tensors(self.backbone, "backbone")

    def sequences(self, batch: Batch):
        cfg = self.config
        v = TokenSequence(Tensor(batch.vision), cfg.vision_grid, StreamTag.VISION)
        g = TokenSequence(Tensor(batch.geometry), (*cfg.geometry_grid, cfg.vision_grid[2]), StreamTag.GEOMETRY)
        p = TokenSequence(Tensor(batch.prompt), None, StreamTag.PROMPT)
        return v, g, p

    def forward(self, batch: Batch, plan: MaskPlan = DISABLED, rngs=None, outcomes=None,
                cfg: NumericsConfig = DEFAULT_NUMERICS) -> tuple[Tensor, FusedSequence]:
        v, g, p = self.sequences(batch)
        fused = run_fusion(self.config.variant, self.config.family, v, g, p, self.fusion, plan, rngs, outcomes, cfg)
        return backbone_forward(fused, p, self.backbone, cfg), fused

    def predict(self, batch: Batch, chunk: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(batch), chunk):
                logits, _ = self.forward(batch.take(slice(start, start + chunk)))
                out.append(np.argmax(logits.data, axis=-1))
        return np.concatenate(out)
