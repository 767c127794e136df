"""Tree-structured Parzen Estimator over flat (unconditional) search spaces.

Each dimension gets an independent 1-d density for the good trials ``l(x)``
and the rest ``g(x)``.  Whole candidate assignments are drawn from the
product of the ``l`` densities and the one with the largest product of
``l(x) / g(x)`` ratios wins.  Objectives are maximized.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import truncnorm

from .errors import ConfigError

DIM_KINDS = ("boolean", "log-uniform", "int-uniform", "categorical")


@dataclass(frozen=True)
class Dim:
    name: str
    kind: str
    lo: float | None = None
    hi: float | None = None
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in DIM_KINDS:
            raise ConfigError(f"dimension {self.name!r}: unknown kind {self.kind!r}; valid: {', '.join(DIM_KINDS)}")
        if self.kind in ("log-uniform", "int-uniform"):
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ConfigError(f"dimension {self.name!r}: need lo < hi, got [{self.lo}, {self.hi}]")
            if self.kind == "log-uniform" and self.lo <= 0:
                raise ConfigError(f"dimension {self.name!r}: log-uniform needs lo > 0, got {self.lo}")
        if self.kind == "boolean":
            object.__setattr__(self, "values", (False, True))
        if self.kind == "categorical":
            if not self.values:
                raise ConfigError(f"dimension {self.name!r}: categorical needs at least one value")
            object.__setattr__(self, "values", tuple(self.values))

    @classmethod
    def boolean(cls, name: str) -> "Dim":
        return cls(name, "boolean")

    @classmethod
    def log_uniform(cls, name: str, lo: float, hi: float) -> "Dim":
        return cls(name, "log-uniform", float(lo), float(hi))

    @classmethod
    def int_uniform(cls, name: str, lo: int, hi: int) -> "Dim":
        return cls(name, "int-uniform", int(lo), int(hi))

    @classmethod
    def categorical(cls, name: str, values: Sequence) -> "Dim":
        return cls(name, "categorical", values=tuple(values))

    @property
    def discrete(self) -> bool:
        return self.kind in ("boolean", "categorical")

    def bounds(self) -> tuple[float, float]:
        """Support of the continuous internal coordinate."""
        if self.kind == "log-uniform":
            return math.log(self.lo), math.log(self.hi)
        return self.lo - 0.5, self.hi + 0.5

    def to_internal(self, value) -> float:
        lo, hi = self.bounds()
        u = math.log(value) if self.kind == "log-uniform" else float(value)
        return min(max(u, lo), hi)

    def from_internal(self, u: float):
        if self.kind == "log-uniform":
            return float(min(max(math.exp(u), self.lo), self.hi))
        return int(min(max(round(u), self.lo), self.hi))

    def index(self, value) -> int:
        for i, v in enumerate(self.values):
            if v == value:
                return i
        raise ConfigError(f"value {value!r} is not in dimension {self.name!r}")

    def prior_sample(self, rng: np.random.Generator):
        if self.discrete:
            return self.values[int(rng.integers(len(self.values)))]
        lo, hi = self.bounds()
        return self.from_internal(rng.uniform(lo, hi))

    def contains(self, value) -> bool:
        if self.discrete:
            return any(v == value for v in self.values)
        if self.kind == "int-uniform":
            return isinstance(value, (int, np.integer)) and self.lo <= value <= self.hi
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if not self.discrete:
            out.update(lo=self.lo, hi=self.hi)
        elif self.kind == "categorical":
            out["values"] = list(self.values)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Dim":
        kind = data.get("kind")
        if kind == "boolean":
            return cls.boolean(data["name"])
        if kind == "log-uniform":
            return cls.log_uniform(data["name"], data["lo"], data["hi"])
        if kind == "int-uniform":
            return cls.int_uniform(data["name"], data["lo"], data["hi"])
        if kind == "categorical":
            return cls.categorical(data["name"], data["values"])
        raise ConfigError(f"unknown dimension kind {kind!r}; valid: {', '.join(DIM_KINDS)}")


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate dimension names {dupes}")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def __len__(self) -> int:
        return len(self.dims)

    def contains(self, assignment: dict) -> bool:
        return set(assignment) == set(self.names) and all(d.contains(assignment[d.name]) for d in self.dims)

    def to_dict(self) -> dict:
        return {"dims": [d.to_dict() for d in self.dims]}

    @classmethod
    def from_dict(cls, data: dict) -> "SearchSpace":
        return cls(tuple(Dim.from_dict(d) for d in data["dims"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TPEConfig:
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 10
    min_bandwidth_frac: float = 0.01  # lower clamp on kernel width, as a fraction of the range
    prior_weight: float = 4.0  # pseudo-observations of the prior in every estimate

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.n_candidates < 1:
            raise ConfigError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if self.n_startup < 0:
            raise ConfigError(f"n_startup must be >= 0, got {self.n_startup}")
        if not 0.0 < self.min_bandwidth_frac <= 1.0 or self.prior_weight <= 0:
            raise ConfigError("min_bandwidth_frac must be in (0, 1] and prior_weight > 0")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "n_candidates": self.n_candidates,
            "n_startup": self.n_startup,
            "min_bandwidth_frac": self.min_bandwidth_frac,
            "prior_weight": self.prior_weight,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TPEConfig":
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown tpe keys {sorted(unknown)}; valid: {', '.join(sorted(known))}")
        return cls(**data)


# --- 1-d density estimates ----------------------------------------------------


@dataclass
class Parzen:
    """Truncated-Gaussian mixture on ``[lo, hi]`` with a uniform prior component."""

    lo: float
    hi: float
    mus: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray  # observation components then the prior (last)

    @classmethod
    def fit(cls, points: Sequence[float], lo: float, hi: float, cfg: TPEConfig) -> "Parzen":
        pts = np.asarray(points, dtype=np.float64)
        width = hi - lo
        n = len(pts)
        # Scott's rule with the prior's spread as the scale; the sample spread
        # collapses once the good set clusters and the sampler stops exploring
        bw = width / math.sqrt(12.0) * max(n, 1) ** (-1.0 / 5.0)
        bw = min(max(bw, cfg.min_bandwidth_frac * width), width)
        weights = np.append(np.ones(n), cfg.prior_weight)
        return cls(lo, hi, pts, np.full(n, bw), weights / weights.sum())

    def _mass(self) -> np.ndarray:
        return ndtr((self.hi - self.mus) / self.sigmas) - ndtr((self.lo - self.mus) / self.sigmas)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=size, p=self.weights)
        out = np.empty(size)
        prior = comp == len(self.mus)
        out[prior] = rng.uniform(self.lo, self.hi, size=int(prior.sum()))
        idx = comp[~prior]
        if idx.size:
            mu, sd = self.mus[idx], self.sigmas[idx]
            out[~prior] = truncnorm.rvs((self.lo - mu) / sd, (self.hi - mu) / sd, loc=mu, scale=sd, random_state=rng)
        return out

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.mus) / self.sigmas
        kern = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigmas * self._mass())
        dens = kern @ self.weights[:-1] + self.weights[-1] / (self.hi - self.lo)
        return np.log(dens)


def categorical_probs(indices: Sequence[int], k: int, cfg: TPEConfig) -> np.ndarray:
    """Observed frequencies with ``prior_weight`` pseudo-counts per category."""
    counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=k).astype(np.float64)
    counts += cfg.prior_weight
    return counts / counts.sum()


# --- sampler ------------------------------------------------------------------


def split_history(history: Sequence[dict], gamma: float) -> tuple[list[dict], list[dict]]:
    """Good/bad split of trials; failed trials always land in the bad set.

    Ranking is by objective descending with trial order breaking ties, so
    the split is deterministic even when every objective is equal.
    """
    ok = [h for h in history if h.get("status", "ok") == "ok"]
    failed = [h for h in history if h.get("status", "ok") != "ok"]
    ranked = sorted(enumerate(ok), key=lambda p: (-p[1]["objective"], p[0]))
    n_good = max(1, math.ceil(gamma * len(ranked)))
    good = [h for _, h in ranked[:n_good]]
    bad = [h for _, h in ranked[n_good:]] + failed
    return good, bad


def _score_dim(dim: Dim, good: list, bad: list, cfg: TPEConfig, rng: np.random.Generator):
    """``n_candidates`` draws from ``l`` for one dim and their ``log l - log g``."""
    if dim.discrete:
        k = len(dim.values)
        pl = categorical_probs([dim.index(v) for v in good], k, cfg)
        pg = categorical_probs([dim.index(v) for v in bad], k, cfg)
        cands = rng.choice(k, size=cfg.n_candidates, p=pl)
        return [dim.values[int(i)] for i in cands], np.log(pl[cands]) - np.log(pg[cands])
    lo, hi = dim.bounds()
    l_est = Parzen.fit([dim.to_internal(v) for v in good], lo, hi, cfg)
    g_est = Parzen.fit([dim.to_internal(v) for v in bad], lo, hi, cfg)
    cands = l_est.sample(rng, cfg.n_candidates)
    return [dim.from_internal(float(u)) for u in cands], l_est.log_pdf(cands) - g_est.log_pdf(cands)


def tpe_suggest(space: SearchSpace, history: Sequence[dict], cfg: TPEConfig, rng: np.random.Generator) -> dict:
    """Next assignment for ``space`` given past trials.

    ``history`` entries need ``params`` (a full assignment), ``objective``
    and optionally ``status`` (``"ok"`` unless stated).  Fewer than
    ``n_startup`` successful trials means a draw from the prior.
    """
    if len(space) == 0:
        raise ConfigError("cannot sample from an empty search space")
    usable = [h for h in history if all(n in h["params"] for n in space.names)]
    n_ok = sum(1 for h in usable if h.get("status", "ok") == "ok")
    if n_ok < max(cfg.n_startup, 1):
        return {d.name: d.prior_sample(rng) for d in space.dims}
    good, bad = split_history(usable, cfg.gamma)
    columns, score = {}, np.zeros(cfg.n_candidates)
    for dim in space.dims:
        values, s = _score_dim(
            dim, [h["params"][dim.name] for h in good], [h["params"][dim.name] for h in bad], cfg, rng
        )
        columns[dim.name] = values
        score += s
    best = int(np.argmax(score))  # first maximum on ties
    return {name: values[best] for name, values in columns.items()}


def random_suggest(space: SearchSpace, history: Sequence[dict], cfg: TPEConfig, rng: np.random.Generator) -> dict:
    """Pure prior sampling with the same signature as :func:`tpe_suggest`."""
    if len(space) == 0:
        raise ConfigError("cannot sample from an empty search space")
    return {d.name: d.prior_sample(rng) for d in space.dims}


@dataclass
class TrialRecord:
    trial: int
    step: int
    params: dict
    objective: float | None
    status: str = "ok"
    seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in ("ok", "failed"):
            raise ConfigError(f"trial status must be ok or failed, got {self.status!r}")
        if (self.objective is not None) != (self.status == "ok"):
            raise ConfigError("a trial has an objective exactly when its status is ok")

    def to_dict(self) -> dict:
        out = {
            "trial": self.trial,
            "step": self.step,
            "params": self.params,
            "objective": self.objective,
            "status": self.status,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }
        if self.extra:
            out["extra"] = self.extra
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrialRecord":
        return cls(
            trial=int(data["trial"]),
            step=int(data["step"]),
            params=dict(data["params"]),
            objective=None if data["objective"] is None else float(data["objective"]),
            status=data["status"],
            seed=int(data["seed"]),
            config_hash=data.get("config_hash", ""),
            extra=dict(data.get("extra", {})),
        )
