"""Two-step hybrid PEFT search.

Step 1 toggles whole methods on and off at their fixed, parameter-minimal
settings.  Step 2 keeps the winning combination, samples each member's
hyperparameters plus one categorical "remove this method" choice, and tracks
the best configuration seen.  Both steps use :func:`tpe_suggest`.

Trials are appended to a line-delimited JSON log as they finish; a rerun
with the same log replays recorded trials instead of re-evaluating them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, MambaPeftError, ResumeConflict, TrialLogError
from .mamba import MambaConfig, MambaModel, reset_head
from .peft import VARIANT_NAMES, PeftSpec, apply_specs, usable_variants, variant_spec
from .store import ParamStore
from .tasks import TaskSpec, make_task
from .tpe import Dim, SearchSpace, TPEConfig, TrialRecord, tpe_suggest
from .training import TrainConfig, train

log = logging.getLogger(__name__)

NOT_REMOVE = "not_remove"
REMOVE_DIM = "remove"
LR_RANGE = (1e-4, 5e-3)
PARTIAL_WD_RANGE = (1e-5, 1e-2)
WD_RANGE = (1e-6, 1e-3)
RANK_RANGE = (4, 16)
SLICE_RANK_RANGE = (4, 12)  # the narrow dt/B/C slices of x_proj
SCALE_RANGE = (1e-2, 1.0)
TOKEN_RANGE = (1, 3)
SCAN_STATE_RANGE = (1, 4)

Objective = Callable[[list[PeftSpec], int], float]


# --- search spaces ------------------------------------------------------------


def step1_space(methods: Sequence[str]) -> SearchSpace:
    return SearchSpace(tuple(Dim.boolean(name) for name in methods))


def method_dims(name: str) -> list[Dim]:
    """Step-2 hyperparameter dimensions of one catalog variant."""
    spec = variant_spec(name)
    dims = []
    if spec.method in ("LoRA", "PartialLoRA", "ParallelAdapter"):
        narrow = spec.method == "PartialLoRA" and spec.target in ("dt", "B", "C")
        dims.append(Dim.int_uniform(f"{name}.r", *(SLICE_RANK_RANGE if narrow else RANK_RANGE)))
        dims.append(Dim.log_uniform(f"{name}.s", *SCALE_RANGE))
    elif spec.method in ("AffixTuning", "PromptTuning"):
        dims.append(Dim.int_uniform(f"{name}.n", *TOKEN_RANGE))
    elif spec.method == "AdditionalScan":
        dims.append(Dim.int_uniform(f"{name}.n_prime", *SCAN_STATE_RANGE))
    dims.append(Dim.log_uniform(f"{name}.lr", *LR_RANGE))
    wd = PARTIAL_WD_RANGE if spec.method == "PartialTuning" else WD_RANGE
    dims.append(Dim.log_uniform(f"{name}.wd", *wd))
    return dims


def step2_space(combination: Sequence[str]) -> SearchSpace:
    dims = [d for name in combination for d in method_dims(name)]
    dims.append(Dim.categorical(REMOVE_DIM, (NOT_REMOVE, *combination)))
    return SearchSpace(tuple(dims))


def default_params(combination: Sequence[str], tcfg: TrainConfig) -> dict:
    """Step-2 coordinates of the step-1 settings (run-wide lr/wd where a method has none)."""
    out = {}
    for name in combination:
        spec = variant_spec(name)
        for dim in method_dims(name):
            key = dim.name.rsplit(".", 1)[1]
            value = getattr(spec, key)
            if value is None:
                value = tcfg.lr if key == "lr" else tcfg.wd
            out[dim.name] = value
    out[REMOVE_DIM] = NOT_REMOVE
    return out


def combination_specs(combination: Sequence[str], params: dict | None = None) -> list[PeftSpec]:
    """Specs for ``combination``; ``params`` (step-2 coordinates) override the fixed values."""
    specs = []
    for name in combination:
        spec = variant_spec(name)
        if params:
            prefix = name + "."
            changes = {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}
            spec = replace(spec, **changes)
        specs.append(spec)
    return specs


def step2_members(combination: Sequence[str], params: dict) -> list[str]:
    removed = params.get(REMOVE_DIM, NOT_REMOVE)
    if removed != NOT_REMOVE and removed not in combination:
        raise MambaPeftError(f"removal target {removed!r} is not in the combination {list(combination)}")
    return [m for m in combination if m != removed]


# --- trial log ----------------------------------------------------------------


def persist_trial(path, record: TrialRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        fh.flush()


def load_trials(path) -> list[TrialRecord]:
    """Records from a trial log; a missing file is an empty history.

    A truncated final line (no newline) is dropped with a warning; any other
    unreadable line is a :class:`TrialLogError` naming its line number.
    """
    path = Path(path)
    if not path.exists():
        return []
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    tail = lines.pop()  # "" when the file ends with a newline
    records = []
    for lineno, line in enumerate(lines, start=1):
        try:
            records.append(TrialRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigError) as exc:
            raise TrialLogError(f"{path}:{lineno}: malformed trial record: {exc}") from None
    if tail.strip():
        log.warning("%s: dropping truncated final line %d", path, len(lines) + 1)
    return records


def _drop_partial_tail(path: Path) -> None:
    """Cut an interrupted final write so appended records start on a fresh line."""
    if not path.exists():
        return
    raw = path.read_bytes()
    if raw and not raw.endswith(b"\n"):
        path.write_bytes(raw[: raw.rfind(b"\n") + 1])


# --- the search ---------------------------------------------------------------


@dataclass
class SearchConfig:
    n1: int = 100
    n2: int = 100
    methods: list[str] | None = None  # step-1 candidates; every catalog variant when None
    tpe: TPEConfig = field(default_factory=TPEConfig)
    seed: int = 0
    repeat_step2: bool = False  # rerun step 2 from its winner until a pass stops improving
    max_passes: int = 5

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0:
            raise ConfigError(f"trial budgets must be >= 0, got N1={self.n1} N2={self.n2}")
        if self.max_passes < 1:
            raise ConfigError(f"max_passes must be >= 1, got {self.max_passes}")
        if isinstance(self.tpe, dict):
            self.tpe = TPEConfig.from_dict(self.tpe)
        if self.methods is not None:
            bad = [m for m in self.methods if m not in VARIANT_NAMES]
            if bad:
                raise ConfigError(f"unknown methods {bad}; valid: {', '.join(VARIANT_NAMES)}")
            if len(set(self.methods)) != len(self.methods):
                raise ConfigError("duplicate methods in the search list")
            self.methods = list(self.methods)

    def to_dict(self) -> dict:
        return {
            "n1": self.n1,
            "n2": self.n2,
            "methods": self.methods,
            "tpe": self.tpe.to_dict(),
            "seed": self.seed,
            "repeat_step2": self.repeat_step2,
            "max_passes": self.max_passes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SearchConfig":
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown search keys {sorted(unknown)}; valid: {', '.join(sorted(known))}")
        return cls(**data)


def config_hash(scfg: SearchConfig, context: dict | None = None) -> str:
    blob = json.dumps({"search": scfg.to_dict(), "context": context or {}}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SearchReport:
    specs: list[PeftSpec]
    combination: list[str]
    params: dict
    objective: float | None
    status: str  # "ok", or "failed" when no step-2 trial succeeded
    step1_combination: list[str]
    step1_objective: float | None
    trials: list[TrialRecord]

    def to_dict(self) -> dict:
        return {
            "peft": [s.to_dict() for s in self.specs],
            "combination": self.combination,
            "params": self.params,
            "objective": self.objective,
            "status": self.status,
            "step1_combination": self.step1_combination,
            "step1_objective": self.step1_objective,
            "n_trials": len(self.trials),
        }


class _Runner:
    """Trial bookkeeping shared by both steps: replay, evaluation, logging."""

    def __init__(self, objective: Objective, scfg: SearchConfig, log_path, context, workers: int, emit):
        self.objective = objective
        self.scfg = scfg
        self.log_path = Path(log_path) if log_path is not None else None
        self.hash = config_hash(scfg, context)
        self.workers = max(1, int(workers))
        self.emit = emit
        self.trials: list[TrialRecord] = []
        self.replay: list[TrialRecord] = []
        if self.log_path is not None:
            self.replay = load_trials(self.log_path)
            _drop_partial_tail(self.log_path)
            for rec in self.replay:
                if rec.config_hash != self.hash:
                    raise ResumeConflict(
                        f"{self.log_path} was written by a different search configuration "
                        f"(hash {rec.config_hash}, current {self.hash})"
                    )

    def _evaluate(self, specs: list[PeftSpec]) -> tuple[float | None, str]:
        try:
            value = float(self.objective(specs, self.scfg.seed))
        except (MambaPeftError, FloatingPointError) as exc:
            log.warning("trial failed: %s", exc)
            return None, "failed"
        if not math.isfinite(value):
            return None, "failed"
        return value, "ok"

    def run(self, step: int, jobs: list[tuple[dict, list[PeftSpec]]], extra: dict | None = None) -> list[TrialRecord]:
        """Evaluate a batch of ``(params, specs)`` in trial order."""
        start = len(self.trials)
        out: list[TrialRecord | None] = [None] * len(jobs)
        fresh = []
        for k, (params, specs) in enumerate(jobs):
            idx = start + k
            if idx < len(self.replay):
                rec = self.replay[idx]
                if rec.step != step or rec.params != _jsonable(params):
                    raise ResumeConflict(f"trial {idx} in the log does not match the replayed search")
                out[k] = rec
            else:
                fresh.append(k)
        if fresh:
            spec_lists = [jobs[k][1] for k in fresh]
            if self.workers > 1 and len(fresh) > 1:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    results = list(pool.map(self._evaluate, spec_lists))
            else:
                results = [self._evaluate(s) for s in spec_lists]
            for k, (value, status) in zip(fresh, results):
                out[k] = TrialRecord(
                    trial=start + k,
                    step=step,
                    params=_jsonable(jobs[k][0]),
                    objective=value,
                    status=status,
                    seed=self.scfg.seed,
                    config_hash=self.hash,
                    extra=dict(extra or {}),
                )
        for rec in out:
            self.trials.append(rec)
            if self.log_path is not None and rec.trial >= len(self.replay):
                persist_trial(self.log_path, rec)
            if self.emit is not None:
                self.emit(rec.to_dict())
        return out  # type: ignore[return-value]


def _jsonable(params: dict) -> dict:
    return json.loads(json.dumps(params))


def _history(records: Sequence[TrialRecord]) -> list[dict]:
    return [{"params": r.params, "objective": r.objective, "status": r.status} for r in records]


def _suggest(runner: _Runner, space: SearchSpace, step: int, history: list[dict], base: int, count: int) -> list[dict]:
    # one rng per trial index: suggestions depend only on (seed, step, index, history)
    return [
        tpe_suggest(space, history, runner.scfg.tpe, np.random.default_rng([runner.scfg.seed, step, base + j]))
        for j in range(count)
    ]


def step1_combination_search(runner: _Runner, methods: Sequence[str], n: int) -> tuple[list[str], float | None]:
    """Boolean search over ``methods`` at fixed settings; ties keep the incumbent."""
    space = step1_space(methods)
    best, best_obj = [], None
    records: list[TrialRecord] = []
    done = 0
    while done < n:
        count = min(runner.workers, n - done)
        batch = _suggest(runner, space, 1, _history(records), done, count)
        jobs = [(p, combination_specs([m for m in methods if p[m]])) for p in batch]
        for rec in runner.run(1, jobs):
            records.append(rec)
            if rec.status == "ok" and (best_obj is None or rec.objective > best_obj):
                best, best_obj = [m for m in methods if rec.params[m]], rec.objective
        done += count
    return best, best_obj


def step2_hyperparam_search(
    runner: _Runner, combination: Sequence[str], n: int, tcfg: TrainConfig, first: tuple[dict, list[PeftSpec]] | None = None, extra=None
) -> tuple[list[str], dict, list[PeftSpec], float | None]:
    """Hyperparameter plus removal search around ``combination``.

    Trial 1 is ``first`` (the defaults unless given) with nothing removed.
    Returns the best ``(members, params, specs, objective)``; when every
    trial fails the defaults come back with a ``None`` objective.
    """
    combination = list(combination)
    space = step2_space(combination)
    if first is None:
        first = (default_params(combination, tcfg), combination_specs(combination))
    best = (combination, first[0], first[1], None)
    records: list[TrialRecord] = []
    done = 0
    n = max(n, 1)
    while done < n:
        if done == 0:
            jobs = [first]
        else:
            count = min(runner.workers, n - done)
            batch = _suggest(runner, space, 2, _history(records), runner_index(runner), count)
            jobs = []
            for p in batch:
                members = step2_members(combination, p)
                jobs.append((p, combination_specs(members, p)))
        for (params, specs), rec in zip(jobs, runner.run(2, jobs, extra)):
            records.append(rec)
            if rec.status == "ok" and (best[3] is None or rec.objective > best[3]):
                best = (step2_members(combination, params), params, specs, rec.objective)
        done += len(jobs)
    return best


def runner_index(runner: _Runner) -> int:
    return len(runner.trials)


def run_hybrid_search(
    objective: Objective,
    scfg: SearchConfig,
    tcfg: TrainConfig | None = None,
    methods: Sequence[str] | None = None,
    log_path=None,
    context: dict | None = None,
    workers: int = 1,
    emit: Callable[[dict], None] | None = None,
) -> SearchReport:
    """Step 1 then step 2 (then more step-2 passes when ``repeat_step2``).

    ``objective(specs, seed)`` returns the value to maximize.  ``context``
    joins the search settings in the log's config hash, so a log written for
    another model or task is refused with :class:`ResumeConflict`.
    """
    tcfg = tcfg or TrainConfig()
    methods = list(scfg.methods or methods or VARIANT_NAMES)
    runner = _Runner(objective, scfg, log_path, context, workers, emit)
    combo1, obj1 = step1_combination_search(runner, methods, scfg.n1)
    members, params, specs, best_obj = step2_hyperparam_search(runner, combo1, scfg.n2, tcfg, extra={"pass": 1})
    passes = 1
    while scfg.repeat_step2 and passes < scfg.max_passes and best_obj is not None:
        passes += 1
        first = ({**_restrict(params, members), REMOVE_DIM: NOT_REMOVE}, specs)
        nxt = step2_hyperparam_search(runner, members, scfg.n2, tcfg, first=first, extra={"pass": passes})
        if nxt[3] is None or nxt[3] <= best_obj:
            break
        members, params, specs, best_obj = nxt
    status = "ok" if best_obj is not None else "failed"
    if best_obj is None:
        members, specs = combo1, combination_specs(combo1)
        params = default_params(combo1, tcfg)
    return SearchReport(
        specs=specs,
        combination=list(members),
        params=_jsonable(params),
        objective=best_obj,
        status=status,
        step1_combination=combo1,
        step1_objective=obj1,
        trials=list(runner.trials),
    )


def _restrict(params: dict, members: Sequence[str]) -> dict:
    keep = tuple(m + "." for m in members)
    return {k: v for k, v in params.items() if k.startswith(keep)}


# --- desk-scale objective -----------------------------------------------------


FINETUNE_MODES = ("peft", "full", "linear-probe")


def adapt(
    base: ParamStore,
    cfg: MambaConfig,
    specs: Sequence[PeftSpec],
    task: TaskSpec,
    tcfg: TrainConfig,
    mode: str = "peft",
    seed: int = 0,
    emit=None,
):
    """Fine-tune a copy of ``base`` on ``task``; returns ``(model, result)``.

    The pretrained head is kept when the class count matches and replaced by
    a fresh one otherwise.  The head is trainable in every mode.
    """
    if mode not in FINETUNE_MODES:
        raise ConfigError(f"unknown finetune mode {mode!r}; valid: {', '.join(FINETUNE_MODES)}")
    if mode == "peft" and not specs:
        raise ConfigError("peft mode needs at least one peft spec (or choose linear-probe / full)")
    if mode != "peft" and specs:
        raise ConfigError(f"{mode} mode takes no peft specs")
    store = base.copy()
    if not store.pretrained:
        store.snapshot_pretrained()
    if task.n_classes != cfg.n_classes:
        cfg = replace(cfg, n_classes=task.n_classes)
        reset_head(store, cfg, task.n_classes, seed)
        store.snapshot_pretrained()
    model = MambaModel(cfg, store)
    if mode == "full":
        for path in store:
            store.set_trainable(path, True)
    else:
        apply_specs(model, list(specs), seed=seed, train_head=True)
    train_set, val_set = make_task(task)
    result = train(model, train_set, val_set, replace(tcfg, seed=seed), emit=emit)
    return model, result


def suite_objective(
    base: ParamStore, cfg: MambaConfig, tasks: Sequence[TaskSpec], tcfg: TrainConfig
) -> Objective:
    """Mean final validation accuracy over ``tasks`` after PEFT fine-tuning."""

    def objective(specs: list[PeftSpec], seed: int) -> float:
        mode = "peft" if specs else "linear-probe"
        accs = []
        for task in tasks:
            _, result = adapt(base, cfg, specs, task, tcfg, mode=mode, seed=seed)
            accs.append(result.final("val")["acc"])
        return float(np.mean(accs))

    return objective


def default_methods(cfg: MambaConfig) -> list[str]:
    return usable_variants(cfg)
