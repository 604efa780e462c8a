"""Geometry-unleashing masking of vision tokens.

A mask is drawn in two stages: a Bernoulli(beta) enable bit, then a set of
``ceil(gamma * N)`` token positions chosen uniformly at random or by the
highest relevance scores.  Masked vision tokens are zeroed in place, never
removed, so the sequence length is unchanged.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DEFAULT_NUMERICS, ContractError, DimensionError, NumericsConfig, Tensor


class MaskMode(str, enum.Enum):
    RANDOM = "random"
    TOPK = "topk"
    DISABLED = "disabled"


@dataclass(frozen=True)
class MaskPlan:
    mode: MaskMode = MaskMode.DISABLED
    gamma: float = 0.8
    beta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", MaskMode(self.mode))
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {self.beta}")

    @property
    def disabled(self) -> bool:
        return self.mode is MaskMode.DISABLED


DISABLED = MaskPlan(MaskMode.DISABLED)


@dataclass(frozen=True)
class MaskOutcome:
    enabled: bool
    mask_set: tuple[int, ...]
    m: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def build(cls, n_tokens: int, enabled: bool, mask_set=()) -> "MaskOutcome":
        mask_set = tuple(sorted(int(j) for j in mask_set)) if enabled else ()
        m = np.ones(n_tokens)
        m[list(mask_set)] = 0.0
        return cls(enabled=bool(enabled), mask_set=mask_set, m=m)

    @classmethod
    def identity(cls, n_tokens: int) -> "MaskOutcome":
        return cls.build(n_tokens, False)

    @property
    def k(self) -> int:
        return len(self.mask_set)

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "k": self.k, "mask_set": list(self.mask_set)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, n_tokens: int) -> "MaskOutcome":
        d = json.loads(text)
        return cls.build(n_tokens, d["enabled"], d["mask_set"])


@dataclass(frozen=True)
class RelevanceScore:
    s: np.ndarray
    u: np.ndarray


def mask_count(n_tokens: int, gamma: float) -> int:
    """``ceil(gamma * n)``, immune to float noise such as ``0.07 * 100 = 7.000000000000001``."""
    return min(n_tokens, math.ceil(round(gamma * n_tokens, 9)))


def sample_enable(beta: float, rng: np.random.Generator) -> bool:
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    return bool(rng.random() < beta)


def random_mask_set(n_tokens: int, gamma: float, rng: np.random.Generator) -> tuple[int, ...]:
    if n_tokens < 1:
        raise ContractError(f"n_tokens must be positive, got {n_tokens}")
    k = mask_count(n_tokens, gamma)
    return tuple(sorted(int(j) for j in rng.choice(n_tokens, size=k, replace=False)))


def relevance_scores(probs, cfg: NumericsConfig = DEFAULT_NUMERICS) -> RelevanceScore:
    """Min-max normalized mean attention each key position receives.

    ``probs`` is ``(..., h, L_B, N)``, an :class:`AttentionRecord` or a raw
    array; the result is detached from the graph.
    """
    a = getattr(probs, "probs", probs)
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if a.ndim < 3:
        raise DimensionError(f"attention probabilities need shape (h, L_B, N), got {a.shape}")
    u = a.mean(axis=(-3, -2))
    lo = u.min(axis=-1, keepdims=True)
    hi = u.max(axis=-1, keepdims=True)
    s = (u - lo) / (hi - lo + cfg.epsilon)
    return RelevanceScore(s=s, u=u)


def topk_mask_set(s, gamma: float) -> tuple[int, ...]:
    """Indices of the ``ceil(gamma * N)`` largest scores; ties go to the lower index."""
    s = np.asarray(getattr(s, "s", s), dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ContractError(f"expected a non-empty score vector, got shape {s.shape}")
    k = mask_count(s.size, gamma)
    order = np.argsort(-s, kind="stable")
    return tuple(sorted(int(j) for j in order[:k]))


def draw_mask(plan: MaskPlan, n_tokens: int, rng: np.random.Generator | None, scores=None) -> MaskOutcome:
    """Sample one outcome; ``scores`` is required in top-k mode."""
    if plan.disabled:
        return MaskOutcome.identity(n_tokens)
    if rng is None:
        raise ContractError("an rng is required when masking is enabled")
    if not sample_enable(plan.beta, rng):
        return MaskOutcome.identity(n_tokens)
    if plan.mode is MaskMode.RANDOM:
        return MaskOutcome.build(n_tokens, True, random_mask_set(n_tokens, plan.gamma, rng))
    if scores is None:
        raise ContractError("top-k masking needs relevance scores")
    scores = np.asarray(getattr(scores, "s", scores))
    if scores.shape != (n_tokens,):
        raise DimensionError(f"scores of shape {scores.shape} for {n_tokens} tokens")
    return MaskOutcome.build(n_tokens, True, topk_mask_set(scores, plan.gamma))


def draw_masks(plan: MaskPlan, n_tokens: int, rngs, scores=None) -> list[MaskOutcome]:
    """Per-row outcomes for a batch; ``rngs`` holds one generator per row."""
    if isinstance(rngs, np.random.Generator) or rngs is None:
        return [draw_mask(plan, n_tokens, rngs, None if scores is None else np.asarray(scores).reshape(-1))]
    out = []
    for i, rng in enumerate(rngs):
        out.append(draw_mask(plan, n_tokens, rng, None if scores is None else scores[i]))
    return out


def apply_mask(f_v, outcome: MaskOutcome | Sequence[MaskOutcome]):
    """Zero the masked rows of ``(N, C)`` tokens, or of ``(B, N, C)`` given one outcome per row."""
    tokens = getattr(f_v, "tokens", f_v)
    outcomes = [outcome] if isinstance(outcome, MaskOutcome) else list(outcome)
    if not any(o.enabled and o.k for o in outcomes):
        return f_v
    m = np.stack([o.m for o in outcomes]) if len(outcomes) > 1 or tokens.ndim == 3 else outcomes[0].m
    n = tokens.shape[-2]
    if m.shape[-1] != n or (tokens.ndim == 3 and m.shape[0] != tokens.shape[0]):
        raise DimensionError(f"mask of shape {m.shape} for tokens of shape {tokens.shape}")
    masked = tokens * m[..., None].astype(tokens.dtype)
    return f_v.with_tokens(masked) if hasattr(f_v, "tokens") else masked
