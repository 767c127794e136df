"""Named parameter registry with trainable flags and a frozen pretrained snapshot."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError

PEFT_PREFIX = "peft."


def is_peft_path(path: str) -> bool:
    return path.startswith(PEFT_PREFIX)


class ParamStore:
    """Path-addressed tensors.

    ``trainable[path]`` mirrors ``params[path].requires_grad``.  Paths listed
    in ``anchored`` are decayed toward their pretrained snapshot rather than
    toward zero by the optimizer.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}
        self.pretrained: dict[str, np.ndarray] = {}
        self.anchored: set[str] = set()

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self.params[path]
        except KeyError:
            raise ConfigError(f"unknown parameter path {path!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def add(self, path: str, data, trainable: bool = False) -> Tensor:
        if path in self.params:
            raise ConfigError(f"parameter path {path!r} already registered")
        t = Tensor(data, requires_grad=trainable)
        self.params[path] = t
        self.trainable[path] = bool(trainable)
        return t

    def remove(self, path: str) -> None:
        self[path]
        del self.params[path]
        del self.trainable[path]
        self.pretrained.pop(path, None)
        self.anchored.discard(path)

    def set_trainable(self, path: str, flag: bool = True) -> None:
        t = self[path]
        t.requires_grad = bool(flag)
        self.trainable[path] = bool(flag)
        if not flag:
            t.grad = None

    def freeze_all(self) -> None:
        for path in self.params:
            self.set_trainable(path, False)
        self.anchored.clear()

    def trainable_paths(self) -> list[str]:
        return [p for p, flag in self.trainable.items() if flag]

    def base_paths(self) -> list[str]:
        return [p for p in self.params if not is_peft_path(p)]

    def snapshot_pretrained(self) -> None:
        """Freeze the current base weights as the immutable pretrained reference."""
        self.pretrained = {}
        for path in self.base_paths():
            snap = self.params[path].data.copy()
            snap.setflags(write=False)
            self.pretrained[path] = snap

    def count_trainable(self) -> int:
        return int(sum(self.params[p].size for p in self.trainable_paths()))

    def zero_grad(self) -> None:
        for path in self.trainable_paths():
            self.params[path].zero_grad()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for path, t in self.params.items():
            out.add(path, t.data, self.trainable[path])
        out.pretrained = dict(self.pretrained)
        out.anchored = set(self.anchored)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self.params.items()}
