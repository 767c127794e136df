"""AdamW with decoupled (optionally anchored) weight decay, cosine schedule and the training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingDiverged
from .mamba import MambaModel
from .peft import path_overrides
from .store import ParamStore
from .tasks import Dataset

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class Schedule:
    total_steps: int
    warmup_steps: int
    peak: float
    floor: float = 0.0

    def __post_init__(self):
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ConfigError(f"bad schedule: total {self.total_steps}, warmup {self.warmup_steps}")

    @classmethod
    def cosine(cls, total_steps: int, peak: float, warmup_frac: float = 0.1) -> "Schedule":
        return cls(total_steps, int(round(warmup_frac * total_steps)), peak)


def lr_at(step: int, sched: Schedule) -> float:
    """Linear warmup to ``peak`` then half-cosine down to ``floor``."""
    if not 0 <= step <= sched.total_steps:
        raise ConfigError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.peak * step / sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    if span == 0:
        return sched.peak
    progress = (step - sched.warmup_steps) / span
    return sched.floor + (sched.peak - sched.floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    lr: float
    wd: float
    overrides: dict[str, tuple[float | None, float | None]] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_store(cls, store: ParamStore, lr: float, wd: float, overrides=None) -> "OptimizerState":
        opt = cls(lr, wd, dict(overrides or {}))
        for path in store.trainable_paths():
            opt.m[path] = np.zeros(store[path].shape)
            opt.v[path] = np.zeros(store[path].shape)
        return opt

    def hparams(self, path: str) -> tuple[float, float]:
        lr, wd = self.overrides.get(path, (None, None))
        return (self.lr if lr is None else lr), (self.wd if wd is None else wd)


def adamw_step(store: ParamStore, opt: OptimizerState, schedule: Schedule | None = None) -> None:
    """One decoupled AdamW update of every trainable path.

    Anchored paths decay toward their pretrained snapshot instead of zero.
    A schedule scales every path's learning rate by ``lr_at / peak``.
    """
    opt.step += 1
    t = opt.step
    scale = 1.0
    if schedule is not None:
        scale = lr_at(min(t, schedule.total_steps), schedule) / schedule.peak if schedule.peak else 0.0
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for path in store.trainable_paths():
        p = store[path]
        if p.grad is None:
            raise ConfigError(f"no gradient for trainable parameter {path!r}")
        if path not in opt.m:
            raise ConfigError(f"optimizer has no moment buffers for {path!r}")
        g = p.grad
        m = opt.m[path] = BETA1 * opt.m[path] + (1.0 - BETA1) * g
        v = opt.v[path] = BETA2 * opt.v[path] + (1.0 - BETA2) * g * g
        lr, wd = opt.hparams(path)
        lr *= scale
        decay_dir = p.data - store.pretrained[path] if path in store.anchored else p.data
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + EPS) - lr * wd * decay_dir


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    wd: float = 1e-4
    warmup_frac: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"epochs must be >= 0 and batch_size >= 1, got {self.epochs}/{self.batch_size}")
        if self.lr < 0 or self.wd < 0 or not 0 <= self.warmup_frac <= 1:
            raise ConfigError("lr, wd must be >= 0 and warmup_frac in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}; valid: {', '.join(sorted(known))}")
        return cls(**data)


def evaluate(model: MambaModel, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and accuracy without recording a graph."""
    total_loss, correct = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            xb, yb = data.x[start : start + batch_size], data.y[start : start + batch_size]
            logits = model(xb)
            total_loss += ad.softmax_cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / len(data), correct / len(data)


@dataclass
class TrainResult:
    history: list[dict]
    steps: int

    def final(self, split: str = "val") -> dict:
        rows = [r for r in self.history if r["split"] == split]
        return rows[-1] if rows else {}


def train(
    model: MambaModel,
    train_set: Dataset,
    val_set: Dataset,
    tcfg: TrainConfig,
    emit: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch training of the model's trainable paths.

    Emits ``{epoch, split, loss, acc}`` per epoch for both splits.  The train
    row averages the mini-batch losses seen during the epoch.  Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    store = model.store
    n = len(train_set)
    per_epoch = math.ceil(n / tcfg.batch_size)
    schedule = Schedule.cosine(per_epoch * tcfg.epochs, tcfg.lr, tcfg.warmup_frac)
    opt = OptimizerState.for_store(store, tcfg.lr, tcfg.wd, path_overrides(model))
    order_rng = np.random.default_rng([tcfg.seed, 1])
    history: list[dict] = []

    def record(row):
        history.append(row)
        if emit is not None:
            emit(row)

    for epoch in range(1, tcfg.epochs + 1):
        order = order_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            xb, yb = train_set.x[idx], train_set.y[idx]
            store.zero_grad()
            logits = model(xb)
            loss = ad.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {opt.step + 1}")
            loss.backward()
            adamw_step(store, opt, schedule)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        record({"epoch": epoch, "split": "train", "loss": loss_sum / n, "acc": correct / n})
        val_loss, val_acc = evaluate(model, val_set)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        record({"epoch": epoch, "split": "val", "loss": val_loss, "acc": val_acc})
    return TrainResult(history, opt.step)
