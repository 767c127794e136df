"""``mambapeft`` command line: pretrain, finetune, search, eval, count-params.

Every command reads one YAML experiment config (``--config``).  Metrics go
to stdout as one JSON object per line; logs go to stderr.

Exit codes: 0 ok, 2 configuration/input error, 3 numerical abort,
4 resume conflict, 1 anything else from the package.

Environment: ``MAMBAPEFT_DETERMINISTIC=1`` forces ``--workers 1``;
``MAMBAPEFT_DEBUG=1`` turns on per-op finiteness checks.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, MambaPeftError, NumericalError, ResumeConflict, TrialLogError
from .mamba import MambaConfig, MambaModel, init_params
from .peft import PeftSpec, apply_specs, count_trainable_params, expected_param_count
from .search import FINETUNE_MODES, SearchConfig, adapt, default_methods, run_hybrid_search, suite_objective
from .tasks import TaskSpec, make_task
from .training import TrainConfig, evaluate, train

log = logging.getLogger("mambapeft")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_RESUME = 0, 1, 2, 3, 4
CONFIG_KEYS = ("model", "task", "training", "peft", "mode", "search")


@dataclass
class ExperimentConfig:
    model: MambaConfig = field(default_factory=MambaConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    peft: list[PeftSpec] = field(default_factory=list)
    mode: str = "peft"
    search: dict | None = None  # SearchConfig fields plus optional ``tasks`` (list of task mappings)

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a mapping, got {type(data).__name__}")
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; valid: {', '.join(CONFIG_KEYS)}")
        peft = data.get("peft") or []
        if not isinstance(peft, list):
            raise ConfigError("peft must be a list of spec mappings")
        mode = data.get("mode", "peft")
        if mode not in FINETUNE_MODES:
            raise ConfigError(f"unknown mode {mode!r}; valid: {', '.join(FINETUNE_MODES)}")
        search = data.get("search")
        if search is not None and not isinstance(search, dict):
            raise ConfigError("search must be a mapping")
        return cls(
            model=MambaConfig.from_dict(data.get("model") or {}),
            task=TaskSpec.from_dict(data.get("task") or {}),
            training=TrainConfig.from_dict(data.get("training") or {}),
            peft=[PeftSpec.from_dict(s) for s in peft],
            mode=mode,
            search=search,
        )

    def to_dict(self) -> dict:
        out = {
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "training": self.training.to_dict(),
            "peft": [s.to_dict() for s in self.peft],
            "mode": self.mode,
        }
        if self.search is not None:
            out["search"] = self.search
        return out

    def search_parts(self) -> tuple[SearchConfig, list[TaskSpec]]:
        if self.search is None:
            raise ConfigError("the search command needs a 'search' block in the config")
        block = dict(self.search)
        tasks = [TaskSpec.from_dict(t) for t in block.pop("tasks", None) or [self.task.to_dict()]]
        return SearchConfig.from_dict(block), tasks


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:  # e.g. a scalar where a mapping belongs
        raise ConfigError(f"{path}: {exc}") from None


def emit(row: dict) -> None:
    sys.stdout.write(json.dumps(row, sort_keys=True) + "\n")
    sys.stdout.flush()


def _seed(args, exp: ExperimentConfig) -> int:
    return exp.training.seed if args.seed is None else args.seed


def _workers(args) -> int:
    if os.environ.get("MAMBAPEFT_DETERMINISTIC", "") not in ("", "0"):
        return 1
    return max(1, args.workers)


def _check_task(cfg: MambaConfig, task: TaskSpec) -> None:
    if cfg.input_dim is None and task.vocab > cfg.vocab_size:
        raise ConfigError(f"task vocab {task.vocab} exceeds model vocab_size {cfg.vocab_size}")
    if task.seq_len > cfg.max_seq_len:
        raise ConfigError(f"task seq_len {task.seq_len} exceeds model max_seq_len {cfg.max_seq_len}")


def _need(args, name: str) -> str:
    value = getattr(args, name)
    if value is None:
        raise ConfigError(f"--{name} is required for {args.command}")
    return value


def _head_size(store) -> int:
    return sum(store[p].data.size for p in store if p.startswith("head."))


def _base_model(path) -> MambaModel:
    model = load_checkpoint(path)
    if model.adapters:
        raise ConfigError(f"{path} already carries adapters; finetune and search start from a pretrained checkpoint")
    return model


# --- commands -------------------------------------------------------------------


def cmd_pretrain(args, exp: ExperimentConfig) -> int:
    if exp.peft:
        raise ConfigError("pretrain takes no peft specs; remove the peft list")
    out = _need(args, "out")
    cfg = exp.model
    if cfg.n_classes != exp.task.n_classes:
        raise ConfigError(f"model n_classes {cfg.n_classes} differs from task n_classes {exp.task.n_classes}")
    _check_task(cfg, exp.task)
    seed = _seed(args, exp)
    model = MambaModel.create(cfg, seed=seed)
    train_set, val_set = make_task(exp.task)
    tcfg = replace(exp.training, seed=seed)
    log.info("pretraining %d epochs on %s", tcfg.epochs, exp.task.kind)
    train(model, train_set, val_set, tcfg, emit=lambda r: emit({"event": "epoch", **r}))
    model.store.snapshot_pretrained()
    save_checkpoint(model, out)
    loss, acc = evaluate(model, val_set)
    emit({"event": "pretrained", "checkpoint": str(out), "val_loss": loss, "val_acc": acc})
    return EXIT_OK


def cmd_finetune(args, exp: ExperimentConfig) -> int:
    base = _base_model(_need(args, "checkpoint"))
    _check_task(base.cfg, exp.task)
    seed = _seed(args, exp)
    model, result = adapt(
        base.store, base.cfg, exp.peft, exp.task, exp.training, mode=exp.mode, seed=seed,
        emit=lambda r: emit({"event": "epoch", **r}),
    )
    final = result.final("val")
    row = {
        "event": "result",
        "mode": exp.mode,
        "peft": [s.key for s in exp.peft],
        "trainable_params": model.store.count_trainable(),
        "adapter_params": count_trainable_params(model.store) - _head_size(model.store),
        "val_loss": final.get("loss"),
        "val_acc": final.get("acc"),
        "seed": seed,
    }
    if args.out:
        save_checkpoint(model, args.out, {"mode": exp.mode})
        row["checkpoint"] = str(args.out)
    emit(row)
    return EXIT_OK


def cmd_search(args, exp: ExperimentConfig) -> int:
    ckpt = _need(args, "checkpoint")
    out = Path(_need(args, "out"))
    base = _base_model(ckpt)
    scfg, tasks = exp.search_parts()
    for task in tasks:
        _check_task(base.cfg, task)
    seed = _seed(args, exp)
    scfg = replace(scfg, seed=seed)
    tcfg = replace(exp.training, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    context = {
        "model": base.cfg.to_dict(),
        "tasks": [t.to_dict() for t in tasks],
        "training": tcfg.to_dict(),
        "checkpoint_sha256": hashlib.sha256(Path(ckpt).read_bytes()).hexdigest(),
    }
    objective = suite_objective(base.store, base.cfg, tasks, tcfg)
    report = run_hybrid_search(
        objective,
        scfg,
        tcfg=tcfg,
        methods=default_methods(base.cfg),
        log_path=out / "trials.jsonl",
        context=context,
        workers=_workers(args),
        emit=lambda r: emit({"event": "trial", **r}),
    )
    best = ExperimentConfig(
        model=base.cfg,
        task=tasks[0],
        training=tcfg,
        peft=report.specs,
        mode="peft" if report.specs else "linear-probe",
    )
    header = f"# best configuration: objective {report.objective!r} (status {report.status}), seed {seed}\n"
    (out / "best.yaml").write_text(header + yaml.safe_dump(best.to_dict(), sort_keys=False), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    emit({"event": "best", **report.to_dict(), "best_config": str(out / "best.yaml")})
    return EXIT_OK


def cmd_eval(args, exp: ExperimentConfig) -> int:
    model = load_checkpoint(_need(args, "checkpoint"))
    _check_task(model.cfg, exp.task)
    _, val_set = make_task(exp.task)
    loss, acc = evaluate(model, val_set)
    emit({
        "event": "eval",
        "val_loss": loss,
        "val_acc": acc,
        "peft": [a.spec.key for a in model.adapters],
        "trainable_params": model.store.count_trainable(),
    })
    return EXIT_OK


def cmd_count_params(args, exp: ExperimentConfig) -> int:
    cfg = load_checkpoint(args.checkpoint).cfg if args.checkpoint else exp.model
    model = MambaModel(cfg, init_params(cfg, seed=0))
    model.store.snapshot_pretrained()
    if exp.mode == "full":
        total = sum(model.store[p].data.size for p in model.store)
        emit({"event": "count", "row": "full", "params": total})
        emit({"event": "count", "row": "total", "params": total})
        return EXIT_OK
    for spec in exp.peft:
        emit({"event": "count", "row": spec.key, "params": expected_param_count(spec, cfg)})
    apply_specs(model, exp.peft, train_head=False)
    adapters = count_trainable_params(model.store)
    head = _head_size(model.store)
    emit({"event": "count", "row": "adapters", "params": adapters})
    emit({"event": "count", "row": "head", "params": head})
    emit({"event": "count", "row": "total", "params": adapters + head})
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "search": cmd_search,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mambapeft",
        description="Selective state space classifier with parameter-efficient fine-tuning.",
        epilog="Exit codes: 0 ok, 2 config error, 3 numerical abort, 4 resume conflict. "
        "MAMBAPEFT_DETERMINISTIC=1 forces one worker; MAMBAPEFT_DEBUG=1 checks every op for NaN/Inf.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "pretrain": "train from scratch on the config task and write a checkpoint (--out)",
        "finetune": "adapt a pretrained checkpoint with the config's peft specs or mode",
        "search": "two-step hybrid PEFT search; writes trials.jsonl, best.yaml, report.json into --out",
        "eval": "validation loss/accuracy of a checkpoint on the config task",
        "count-params": "trainable parameter count per peft spec and in total",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="YAML experiment config (model, task, training, peft, mode, search)")
        p.add_argument("--checkpoint", help="input checkpoint (MPK1)")
        p.add_argument("--out", help="output checkpoint path (search: output directory)")
        p.add_argument("--seed", type=int, help="overrides training.seed")
        p.add_argument("--workers", type=int, default=1, help="parallel search trials (default 1)")
        p.add_argument("--log-level", default="INFO", help="stderr log level (default INFO)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        exp = load_config(args.config)
        return COMMANDS[args.command](args, exp)
    except ResumeConflict as exc:
        log.error("resume conflict: %s", exc)
        return EXIT_RESUME
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, TrialLogError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except MambaPeftError as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
