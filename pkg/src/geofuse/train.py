"""Optimizer, learning-rate schedule, training loop and evaluation."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Batch, Model
from .fusion import Family, Variant
from .masking import DISABLED, MaskMode, MaskPlan
from .synthdata import Sample
from .tensor import ContractError, Tensor, cross_entropy

logger = logging.getLogger(__name__)

STREAM_DATA = 1
STREAM_MASK = 2


class Schedule(str, enum.Enum):
    WARMUP_COSINE = "warmup_cosine"
    CONSTANT = "constant"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 800
    batch_size: int = 16
    lr_peak: float = 5e-3
    warmup_steps: int = 80
    schedule: Schedule = Schedule.WARMUP_COSINE
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask: MaskPlan = field(default_factory=lambda: MaskPlan(MaskMode.TOPK, 0.8, 0.5))
    variant: Variant = Variant.A
    eval_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ContractError(f"warmup_steps must lie in [0, steps], got {self.warmup_steps}")
        if not self.lr_peak > 0:
            raise ContractError("lr_peak must be positive")


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to 0 at ``cfg.steps``."""
    if cfg.schedule is Schedule.CONSTANT:
        return cfg.lr_peak
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    span = cfg.steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr_peak if step <= cfg.steps else 0.0
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_seed: tuple, indices):
        super().__init__(f"non-finite loss at step {step} (batch rng key {batch_seed}, sample indices {list(indices)})")
        self.step = step
        self.batch_seed = batch_seed
        self.indices = list(indices)


@dataclass
class HistoryRow:
    step: int
    lr: float
    loss: float
    eval_acc: float | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[HistoryRow]
    train_acc: float
    test_acc: float


def mask_rngs(seed: int, step: int, n: int) -> list[np.random.Generator]:
    """One mask stream per (seed, step, sample), independent of data order and mask mode."""
    return [np.random.default_rng([int(seed), STREAM_MASK, step, i]) for i in range(n)]


def training_plan(cfg: TrainConfig, family: Family) -> MaskPlan:
    """Mask plan actually used in training: off for unmasked variants, top-k only on the query path."""
    if not cfg.variant.masked or cfg.mask.disabled:
        return DISABLED
    if Family(family) is Family.STATIC and cfg.mask.mode is MaskMode.TOPK:
        return MaskPlan(MaskMode.RANDOM, cfg.mask.gamma, cfg.mask.beta)
    return cfg.mask


def train(model: Model, train_set: list[Sample] | Batch, test_set: list[Sample] | Batch, cfg: TrainConfig,
          progress=None) -> TrainResult:
    if len(train_set) == 0 or len(test_set) == 0:
        raise ContractError("training needs non-empty train and test sets")
    dtype = np.dtype(model.config.dtype)
    train_b = train_set if isinstance(train_set, Batch) else Batch.from_samples(train_set, dtype)
    test_b = test_set if isinstance(test_set, Batch) else Batch.from_samples(test_set, dtype)
    params = model.named_parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    plan = training_plan(cfg, model.config.family)
    data_rng = np.random.default_rng([int(cfg.seed), STREAM_DATA])
    order = data_rng.permutation(len(train_b))
    cursor = 0
    history: list[HistoryRow] = []

    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(order):
            order = data_rng.permutation(len(train_b))
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch = train_b.take(idx)
        logits, _ = model.forward(batch, plan, mask_rngs(cfg.seed, step, len(idx)))
        loss = cross_entropy(logits, batch.labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, (cfg.seed, STREAM_MASK, step), idx)
        loss.backward()
        lr = learning_rate(step, cfg)
        opt.step(lr)
        row = HistoryRow(step, lr, value)
        if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
            row.eval_acc = accuracy(model, test_b)
            if progress is not None:
                progress(row)
        history.append(row)

    return TrainResult(model, history, accuracy(model, train_b), accuracy(model, test_b))


def accuracy(model, batch: Batch) -> float:
    return float(np.mean(model.predict(batch) == batch.labels))


def evaluate(model, samples: list[Sample] | Batch, mask: MaskPlan = DISABLED) -> float:
    """Inference accuracy.  Masking is a training-only device, so only ``DISABLED`` is accepted."""
    if not isinstance(mask, MaskPlan) or not mask.disabled:
        raise ContractError("evaluation runs with masking disabled")
    if len(samples) == 0:
        raise ContractError("cannot evaluate on an empty sample list")
    if isinstance(samples, Batch):
        return accuracy(model, samples)
    if hasattr(model, "config"):
        return accuracy(model, Batch.from_samples(list(samples), np.dtype(model.config.dtype)))
    preds = np.asarray(model.predict(list(samples)))
    return float(np.mean(preds == np.array([s.label for s in samples])))


class OracleModel:
    """Answers from geometry through the label oracle, bypassing all parameters."""

    def predict(self, samples: list[Sample]) -> np.ndarray:
        from .synthdata import oracle_label

        return np.array([oracle_label(s) for s in samples])
