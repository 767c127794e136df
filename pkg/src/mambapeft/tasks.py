"""Synthetic sequence-classification tasks.

Every example is a pure function of ``(spec, index)``: indices
``0 .. n_train-1`` form the training split and the next ``n_val`` indices
the validation split.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError

TASK_KINDS = ("selective-copy", "majority-token", "shifted-majority", "lagged-recall")
_KIND_ID = {k: i for i, k in enumerate(TASK_KINDS)}


@dataclass
class TaskSpec:
    kind: str = "majority-token"
    vocab: int = 8
    seq_len: int = 16
    n_classes: int = 2
    n_train: int = 512
    n_val: int = 256
    seed: int = 0
    dominance: float = 0.5  # majority tasks: chance a position copies the dominant token
    lag: int = 2  # lagged-recall
    permutation: list[int] | None = None  # shifted-majority; derived from perm_seed when None
    perm_seed: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; valid: {', '.join(TASK_KINDS)}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError(f"split sizes must be >= 1, got {self.n_train}/{self.n_val}")
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        symbols = self.vocab - 1 if self.kind == "selective-copy" else self.vocab
        if symbols < self.n_classes:
            raise ConfigError(
                f"{self.kind}: {symbols} content tokens cannot cover {self.n_classes} classes (vocab {self.vocab})"
            )
        if not 0.0 <= self.dominance <= 1.0:
            raise ConfigError(f"dominance must be in [0, 1], got {self.dominance}")
        if self.kind == "lagged-recall" and not 0 <= self.lag < self.seq_len:
            raise ConfigError(f"lag must be in [0, {self.seq_len}), got {self.lag}")
        if self.permutation is not None:
            perm = [int(p) for p in self.permutation]
            if sorted(perm) != list(range(self.vocab)):
                raise ConfigError(f"permutation must reorder 0..{self.vocab - 1}, got {perm}")
            self.permutation = perm

    def perm(self) -> np.ndarray:
        if self.permutation is not None:
            return np.asarray(self.permutation, dtype=np.int64)
        return np.random.default_rng([self.perm_seed, 7919]).permutation(self.vocab)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown task keys {sorted(unknown)}; valid: {', '.join(sorted(known))}")
        return cls(**data)


@dataclass
class Dataset:
    x: np.ndarray  # [n, T] int64
    y: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return len(self.y)


def majority_label(tokens: np.ndarray, vocab: int, n_classes: int) -> int:
    """Most frequent token (lowest id on ties) reduced mod ``n_classes``."""
    return int(np.bincount(tokens, minlength=vocab).argmax()) % n_classes


def _majority_tokens(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    dominant = rng.integers(spec.vocab)
    noise = rng.integers(spec.vocab, size=spec.seq_len)
    keep = rng.random(spec.seq_len) < spec.dominance
    return np.where(keep, dominant, noise)


def sample(spec: TaskSpec, index: int) -> tuple[np.ndarray, int]:
    # the shifted task draws the same underlying sequences as the plain majority task
    stream = "majority-token" if spec.kind == "shifted-majority" else spec.kind
    rng = np.random.default_rng([spec.seed, _KIND_ID[stream], index])
    T, V = spec.seq_len, spec.vocab
    if spec.kind == "selective-copy":
        marker = V - 1
        x = rng.integers(V - 1, size=T)
        at = rng.integers(T - 1)
        x[at] = marker
        return x, int(x[at + 1]) % spec.n_classes
    if spec.kind == "lagged-recall":
        x = rng.integers(V, size=T)
        return x, int(x[T - 1 - spec.lag]) % spec.n_classes
    x = _majority_tokens(spec, rng)
    label = majority_label(x, V, spec.n_classes)
    if spec.kind == "shifted-majority":
        x = spec.perm()[x]
    return x, label


def make_split(spec: TaskSpec, start: int, count: int) -> Dataset:
    xs, ys = zip(*(sample(spec, i) for i in range(start, start + count)))
    return Dataset(np.stack(xs).astype(np.int64), np.asarray(ys, dtype=np.int64))


def make_task(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    return make_split(spec, 0, spec.n_train), make_split(spec, spec.n_train, spec.n_val)
