"""Parameter-efficient fine-tuning methods for the Mamba classifier.

Every method is described by a :class:`PeftSpec` and realised by an
:class:`AdapterState` that owns tensors under ``peft.{method}.{target}.*``
in the model's :class:`~mambapeft.store.ParamStore` and installs callables
at the hook sites of :mod:`mambapeft.mamba`.  The backbone code is never
patched, so removing an adapter restores the base forward exactly.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .mamba import MambaConfig, MambaModel
from .store import ParamStore, is_peft_path

METHODS = (
    "LoRA",
    "PartialLoRA",
    "ParallelAdapter",
    "PromptTuning",
    "AffixTuning",
    "AdditionalScan",
    "PartialTuning",
)
LORA_TARGETS = ("embedding", "in_proj", "x_proj", "dt_proj", "out_proj")
PARTIAL_LORA_SLICES = ("X", "Z", "dt", "B", "C")
PARTIAL_TUNING_TARGETS = ("bias", "A", "D", "conv1d", "cls_token", "pos_embed")
PROMPT_PLACEMENTS = ("prefix", "infix", "suffix", "prefix+suffix")
AFFIX_POSITIONS = ("before_inproj", "after_inproj")
AFFIX_PLACEMENTS = ("prefix", "infix")
SCAN_PLACEMENTS = ("top", "bottom")
SCAN_INITS = ("s4d", "constant", "neighbor")

DEFAULT_ANCHOR_WD = 1e-3
TOKEN_INIT_STD = 0.02

# fields each method reads besides lr / wd / layers
RELEVANT_FIELDS = {
    "LoRA": ("target", "r", "s"),
    "PartialLoRA": ("target", "r", "s"),
    "ParallelAdapter": ("r", "s"),
    "PromptTuning": ("n", "placement", "use_projection"),
    "AffixTuning": ("n", "position", "placement", "use_projection"),
    "AdditionalScan": ("n_prime", "placement", "init", "init_value"),
    "PartialTuning": ("target",),
}
FIXED_TARGETS = {
    "ParallelAdapter": "out_proj",
    "PromptTuning": "embedding",
    "AdditionalScan": "A",
}


def _choice(name: str, value, valid: Sequence[str]) -> None:
    if value not in valid:
        raise ConfigError(f"invalid {name} {value!r}; valid: {', '.join(valid)}")


@dataclass
class PeftSpec:
    """Declarative description of one PEFT method instance.

    Only the fields listed in :data:`RELEVANT_FIELDS` for ``method`` are
    read.  ``layers`` optionally restricts per-layer methods to a subset of
    blocks; ``lr`` / ``wd`` override the run-wide values for this method's
    tensors.
    """

    method: str
    target: str | None = None
    r: int = 8
    s: float = 0.1
    n: int = 1
    n_prime: int = 1
    placement: str | None = None
    position: str | None = None
    init: str | None = None
    init_value: float = 0.0
    use_projection: bool = False
    lr: float | None = None
    wd: float | None = None
    layers: list[int] | None = None

    def __post_init__(self):
        _choice("method", self.method, METHODS)
        m = self.method
        if m in FIXED_TARGETS:
            if self.target not in (None, FIXED_TARGETS[m]):
                raise ConfigError(f"{m} has fixed target {FIXED_TARGETS[m]!r}, got {self.target!r}")
            self.target = FIXED_TARGETS[m]
        if m == "LoRA":
            _choice("LoRA target", self.target, LORA_TARGETS)
        elif m == "PartialLoRA":
            _choice("PartialLoRA slice", self.target, PARTIAL_LORA_SLICES)
        elif m == "PartialTuning":
            _choice("PartialTuning target", self.target, PARTIAL_TUNING_TARGETS)
        elif m == "PromptTuning":
            self.placement = self.placement or "prefix+suffix"
            _choice("prompt placement", self.placement, PROMPT_PLACEMENTS)
        elif m == "AffixTuning":
            self.position = self.position or "after_inproj"
            self.placement = self.placement or "prefix"
            _choice("affix position", self.position, AFFIX_POSITIONS)
            _choice("affix placement", self.placement, AFFIX_PLACEMENTS)
            self.target = self.position
        elif m == "AdditionalScan":
            self.placement = self.placement or "top"
            _choice("additional-scan placement", self.placement, SCAN_PLACEMENTS)
            self._parse_init()
        if m in ("LoRA", "PartialLoRA", "ParallelAdapter") and int(self.r) < 1:
            raise ConfigError(f"{m} rank r must be >= 1, got {self.r}")
        if m in ("PromptTuning", "AffixTuning") and int(self.n) < 1:
            raise ConfigError(f"{m} token count n must be >= 1, got {self.n}")
        if m == "AdditionalScan" and int(self.n_prime) < 1:
            raise ConfigError(f"AdditionalScan n_prime must be >= 1, got {self.n_prime}")
        if self.lr is not None and self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.wd is not None and self.wd < 0:
            raise ConfigError(f"wd must be >= 0, got {self.wd}")
        if self.layers is not None:
            self.layers = sorted({int(i) for i in self.layers})
        self.r, self.n, self.n_prime = int(self.r), int(self.n), int(self.n_prime)

    def _parse_init(self):
        init = self.init or "neighbor"
        match = re.fullmatch(r"constant\(\s*([-+0-9.eE]+)\s*\)", init)
        if match:
            init, self.init_value = "constant", float(match.group(1))
        _choice("additional-scan init", init, SCAN_INITS)
        self.init = init

    @property
    def key(self) -> str:
        """Short display name, e.g. ``LoRA(in_proj)`` or ``LoRA_p(X)``."""
        if self.method == "LoRA":
            return f"LoRA({self.target})"
        if self.method == "PartialLoRA":
            return f"LoRA_p({self.target})"
        if self.method == "PartialTuning":
            return f"PartialTuning({self.target})"
        return self.method

    @property
    def prefix(self) -> str:
        return f"peft.{self.method}.{self.target}"

    def to_dict(self) -> dict:
        out = {"method": self.method}
        for name in RELEVANT_FIELDS[self.method]:
            out[name] = getattr(self, name)
        for name in ("lr", "wd", "layers"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PeftSpec":
        if not isinstance(data, dict) or "method" not in data:
            raise ConfigError(f"peft spec must be a mapping with a 'method' key, got {data!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown peft spec keys {sorted(unknown)}; valid: {', '.join(sorted(known))}")
        return cls(**data)


# --- geometry -----------------------------------------------------------------


def token_positions(T: int, n: int, placement: str) -> np.ndarray:
    """Indices of ``n`` inserted tokens in the resulting length ``T + n`` sequence."""
    if placement == "prefix":
        pos = np.arange(n)
    elif placement == "suffix":
        pos = T + np.arange(n)
    elif placement == "infix":
        pos = np.array([k * (T + n) // (n + 1) for k in range(1, n + 1)])
    elif placement == "prefix+suffix":
        front = (n + 1) // 2
        pos = np.concatenate([np.arange(front), T + front + np.arange(n - front)])
    else:
        raise ConfigError(f"invalid placement {placement!r}; valid: {', '.join(PROMPT_PLACEMENTS)}")
    return pos.astype(np.intp)


def linear_shape(cfg: MambaConfig, target: str) -> tuple[int, int]:
    di, d, N, R = cfg.d_inner, cfg.d_model, cfg.d_state, cfg.dt_rank
    shapes = {
        "embedding": (cfg.input_dim or cfg.vocab_size, d),
        "in_proj": (d, 2 * di),
        "x_proj": (di, R + 2 * N),
        "dt_proj": (R, di),
        "out_proj": (di, d),
    }
    return shapes[target]


def slice_geometry(cfg: MambaConfig, name: str) -> tuple[str, int, int]:
    """``(linear, col_start, col_stop)`` of a partial-LoRA feature slice."""
    di, N, R = cfg.d_inner, cfg.d_state, cfg.dt_rank
    table = {
        "X": ("in_proj", 0, di),
        "Z": ("in_proj", di, 2 * di),
        "dt": ("x_proj", 0, R),
        "B": ("x_proj", R, R + N),
        "C": ("x_proj", R + N, R + 2 * N),
    }
    return table[name]


def partial_tuning_paths(cfg: MambaConfig, target: str, layers: Sequence[int]) -> list[str]:
    per_layer = {
        "bias": ("dt_proj.bias", "conv1d.bias"),
        "A": ("A",),
        "D": ("D",),
        "conv1d": ("conv1d.weight",),
    }
    if target in per_layer:
        return [f"layers.{i}.{leaf}" for i in layers for leaf in per_layer[target]]
    return [target]


def parallel_adapter_delta(h, w_down, w_up, s: float) -> np.ndarray:
    """``s * relu(h @ W_down) @ W_up`` on plain arrays."""
    return s * np.maximum(np.asarray(h) @ np.asarray(w_down), 0.0) @ np.asarray(w_up)


def _layers(spec: PeftSpec, cfg: MambaConfig) -> list[int]:
    if spec.layers is None:
        return list(range(cfg.n_layers))
    bad = [i for i in spec.layers if not 0 <= i < cfg.n_layers]
    if bad:
        raise ConfigError(f"{spec.key}: layers {bad} out of range for {cfg.n_layers} layers")
    return list(spec.layers)


def expected_param_count(spec: PeftSpec, cfg: MambaConfig) -> int:
    """Closed-form number of trainable parameters one spec adds."""
    L = len(_layers(spec, cfg))
    d, di, N, K = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv
    m = spec.method
    if m == "LoRA":
        din, dout = linear_shape(cfg, spec.target)
        return spec.r * (din + dout) * (1 if spec.target == "embedding" else L)
    if m == "PartialLoRA":
        linear, lo, hi = slice_geometry(cfg, spec.target)
        return L * spec.r * (linear_shape(cfg, linear)[0] + hi - lo)
    if m == "ParallelAdapter":
        return L * spec.r * (di + d)
    if m == "PromptTuning":
        return spec.n * d + (d * d if spec.use_projection else 0)
    if m == "AffixTuning":
        width = d if spec.position == "before_inproj" else di
        if spec.use_projection:
            return spec.n * d + L * d * width
        return L * spec.n * width
    if m == "AdditionalScan":
        return L * 3 * di * spec.n_prime
    per_target = {
        "bias": L * 2 * di,
        "A": L * di * N,
        "D": L * di,
        "conv1d": L * K * di,
        "cls_token": d,
        "pos_embed": cfg.max_seq_len * d,
    }
    return per_target[spec.target]


def count_trainable_params(store: ParamStore) -> int:
    return store.count_trainable()


# --- adapters ---------------------------------------------------------------


class AdapterState:
    """Tensors and hook installation for one applied :class:`PeftSpec`."""

    mergeable = False

    def __init__(self, spec: PeftSpec, cfg: MambaConfig):
        self.spec = spec
        self.layers = _layers(spec, cfg)
        self.paths: list[str] = []

    def _add(self, store: ParamStore, leaf: str, data) -> str:
        path = f"{self.spec.prefix}.{leaf}"
        store.add(path, data, trainable=True)
        self.paths.append(path)
        return path

    def _layer_path(self, i: int, leaf: str) -> str:
        return f"{self.spec.prefix}.layers.{i}.{leaf}"

    def attach(self, store: ParamStore, cfg: MambaConfig, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def install(self, hooks, store: ParamStore, cfg: MambaConfig) -> None:
        pass

    def detach(self, store: ParamStore) -> None:
        for path in self.paths:
            store.remove(path)
        self.paths = []

    def merge(self, store: ParamStore, cfg: MambaConfig) -> "AdapterState | None":
        """Fold into base weights; returns a replacement adapter or None."""
        raise ConfigError(f"{self.spec.key} is not mergeable")

    def trainable_paths(self) -> list[str]:
        return list(self.paths)

    def overrides(self) -> dict[str, tuple[float | None, float | None]]:
        return {p: (self.spec.lr, self.spec.wd) for p in self.trainable_paths()}


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class LowRankAdapter(AdapterState):
    """LoRA on a whole linear or on one output-column slice of it."""

    mergeable = True

    def __init__(self, spec: PeftSpec, cfg: MambaConfig):
        super().__init__(spec, cfg)
        if spec.method == "LoRA":
            self.linear = spec.target
            self.cols = (0, linear_shape(cfg, spec.target)[1])
            self.site = spec.target
        else:
            self.linear, lo, hi = slice_geometry(cfg, spec.target)
            self.cols = (lo, hi)
            self.site = spec.target
        self.d_in = linear_shape(cfg, self.linear)[0]
        self.d_out = self.cols[1] - self.cols[0]
        self.per_layer = self.linear != "embedding"

    def _slots(self):
        if not self.per_layer:
            return [(None, "W_down", "W_up")]
        return [(i, f"layers.{i}.W_down", f"layers.{i}.W_up") for i in self.layers]

    def attach(self, store, cfg, rng):
        for _, down, up in self._slots():
            self._add(store, down, _uniform(rng, self.d_in, (self.d_in, self.spec.r)))
            self._add(store, up, np.zeros((self.spec.r, self.d_out)))

    def install(self, hooks, store, cfg):
        s = self.spec.s
        for i, down, up in self._slots():
            wd, wu = store[f"{self.spec.prefix}.{down}"], store[f"{self.spec.prefix}.{up}"]
            if i is None:
                if cfg.input_dim is None:
                    def fn(ids, out, wd=wd, wu=wu):
                        return out + ad.mul(ad.matmul(ad.embedding(ids, wd), wu), s)
                else:
                    def fn(x, out, wd=wd, wu=wu):
                        return out + ad.mul(ad.matmul(ad.matmul(ad.Tensor._wrap(x), wd), wu), s)
                hooks.add("embedding", fn)
            else:
                def fn(inp, out, wd=wd, wu=wu):
                    return out + ad.mul(ad.matmul(ad.matmul(inp, wd), wu), s)
                hooks.add(self.site, fn, layer=i)

    def merge(self, store, cfg):
        lo, hi = self.cols
        for i, down, up in self._slots():
            base = "embedding" if i is None else f"layers.{i}.{self.linear}.weight"
            delta = self.spec.s * (store[f"{self.spec.prefix}.{down}"].data @ store[f"{self.spec.prefix}.{up}"].data)
            store[base].data[:, lo:hi] += delta
        self.detach(store)
        return None


class ParallelAdapter(AdapterState):
    def attach(self, store, cfg, rng):
        r = self.spec.r
        for i in self.layers:
            self._add(store, f"layers.{i}.W_down", _uniform(rng, cfg.d_inner, (cfg.d_inner, r)))
            self._add(store, f"layers.{i}.W_up", np.zeros((r, cfg.d_model)))

    def install(self, hooks, store, cfg):
        s = self.spec.s
        for i in self.layers:
            wd, wu = store[self._layer_path(i, "W_down")], store[self._layer_path(i, "W_up")]

            def fn(h, wd=wd, wu=wu):
                return ad.mul(ad.matmul(ad.relu(ad.matmul(h, wd)), wu), s)

            hooks.add("parallel_out_proj", fn, layer=i)


class PromptAdapter(AdapterState):
    """Learnable tokens inserted once, after embedding, before the first block."""

    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        self.mergeable = spec.use_projection

    def attach(self, store, cfg, rng):
        d, n = cfg.d_model, self.spec.n
        self._add(store, "tokens", TOKEN_INIT_STD * rng.normal(size=(n, d)))
        if self.spec.use_projection:
            self._add(store, "proj", np.eye(d))

    def install(self, hooks, store, cfg):
        spec = self.spec
        tokens = store[f"{spec.prefix}.tokens"]
        proj = store[f"{spec.prefix}.proj"] if spec.use_projection else None
        n_special = 1 if cfg.use_cls_token else 0

        def fn(seq):
            T = seq.shape[-2]
            if T - n_special + spec.n > cfg.max_seq_len:
                raise ConfigError(
                    f"prompt tokens overflow: {T - n_special} + {spec.n} > max_seq_len {cfg.max_seq_len}"
                )
            pos = token_positions(T, spec.n, spec.placement)
            tok = tokens if proj is None else ad.matmul(tokens, proj)
            return ad.insert_time(seq, tok, pos), pos

        hooks.add("tokens", fn)

    def merge(self, store, cfg):
        if not self.spec.use_projection:
            return super().merge(store, cfg)
        folded = store[f"{self.spec.prefix}.tokens"].data @ store[f"{self.spec.prefix}.proj"].data
        self.detach(store)
        out = PromptAdapter(replace(self.spec, use_projection=False), cfg)
        out._add(store, "tokens", folded)
        return out


class AffixAdapter(AdapterState):
    """Per-layer tokens inserted inside each block and dropped again downstream.

    ``after_inproj`` tokens enter the X (SSM) stream only; their outputs are
    dropped right after the scan, before gating with Z.
    """

    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        self.mergeable = spec.use_projection
        self.width = cfg.d_model if spec.position == "before_inproj" else cfg.d_inner
        self.site = "before_in_proj" if spec.position == "before_inproj" else "after_in_proj"

    def attach(self, store, cfg, rng):
        n, d = self.spec.n, cfg.d_model
        if not self.spec.use_projection:
            for i in self.layers:
                self._add(store, f"layers.{i}.tokens", TOKEN_INIT_STD * rng.normal(size=(n, self.width)))
            return
        self._add(store, "embed", TOKEN_INIT_STD * rng.normal(size=(n, d)))
        for i in self.layers:
            if self.width == d:
                init = np.eye(d)
            else:
                # start as "what in_proj would make of the embedding"
                init = store[f"layers.{i}.in_proj.weight"].data[:, : cfg.d_inner].copy()
            self._add(store, f"layers.{i}.proj", init)

    def _tokens(self, store, i):
        if self.spec.use_projection:
            return ad.matmul(store[f"{self.spec.prefix}.embed"], store[self._layer_path(i, "proj")])
        return store[self._layer_path(i, "tokens")]

    def install(self, hooks, store, cfg):
        spec = self.spec
        for i in self.layers:
            tok = self._tokens(store, i)

            def fn(seq, tok=tok):
                pos = token_positions(seq.shape[-2], spec.n, spec.placement)
                return ad.insert_time(seq, tok, pos), pos

            hooks.add(self.site, fn, layer=i)

    def merge(self, store, cfg):
        if not self.spec.use_projection:
            return super().merge(store, cfg)
        embed = store[f"{self.spec.prefix}.embed"].data
        folded = {i: embed @ store[self._layer_path(i, "proj")].data for i in self.layers}
        self.detach(store)
        out = AffixAdapter(replace(self.spec, use_projection=False), cfg)
        for i in out.layers:
            out._add(store, f"layers.{i}.tokens", folded[i])
        return out


class AdditionalScanAdapter(AdapterState):
    """Extra state dimensions with their own A, B and C, scanned alongside the base state."""

    def attach(self, store, cfg, rng):
        di, n2, N = cfg.d_inner, self.spec.n_prime, cfg.d_state
        for i in self.layers:
            A = store[f"layers.{i}.A"].data
            if self.spec.init == "s4d":
                a_ext = np.tile(np.arange(N + 1, N + n2 + 1, dtype=np.float64), (di, 1))
            elif self.spec.init == "constant":
                a_ext = np.full((di, n2), float(self.spec.init_value))
            else:
                col = 0 if self.spec.placement == "top" else N - 1
                a_ext = np.repeat(A[:, col : col + 1], n2, axis=1)
            self._add(store, f"layers.{i}.A", a_ext)
            self._add(store, f"layers.{i}.W_B", _uniform(rng, di, (di, n2)))
            self._add(store, f"layers.{i}.W_C", np.zeros((di, n2)))

    def install(self, hooks, store, cfg):
        for i in self.layers:
            a, wb, wc = (store[self._layer_path(i, leaf)] for leaf in ("A", "W_B", "W_C"))
            hooks.add("scan_extension", lambda a=a, wb=wb, wc=wc: (a, wb, wc), layer=i)


class PartialTuningAdapter(AdapterState):
    """Unfreezes existing backbone tensors; decays them toward their pretrained values."""

    def __init__(self, spec, cfg):
        super().__init__(spec, cfg)
        self.tuned = partial_tuning_paths(cfg, spec.target, self.layers)

    def attach(self, store, cfg, rng):
        missing = [p for p in self.tuned if p not in store]
        if missing:
            raise ConfigError(f"{self.spec.key}: model has no parameter(s) {missing}")
        for path in self.tuned:
            store.anchored.add(path)

    def detach(self, store):
        for path in self.tuned:
            if path in store.pretrained:
                store[path].data[...] = store.pretrained[path]
            store.anchored.discard(path)

    def trainable_paths(self):
        return list(self.tuned)

    def overrides(self):
        wd = DEFAULT_ANCHOR_WD if self.spec.wd is None else self.spec.wd
        return {p: (self.spec.lr, wd) for p in self.tuned}


ADAPTERS = {
    "LoRA": LowRankAdapter,
    "PartialLoRA": LowRankAdapter,
    "ParallelAdapter": ParallelAdapter,
    "PromptTuning": PromptAdapter,
    "AffixTuning": AffixAdapter,
    "AdditionalScan": AdditionalScanAdapter,
    "PartialTuning": PartialTuningAdapter,
}


# --- applying specs to a model ---------------------------------------------------


def refresh_trainable(model: MambaModel) -> None:
    """Base paths are frozen unless tuned by partial tuning (or the head, when enabled)."""
    store = model.store
    tuned = set()
    for adapter in model.adapters:
        if isinstance(adapter, PartialTuningAdapter):
            tuned.update(adapter.tuned)
    for path in store.base_paths():
        head = path.startswith("head.") and model.train_head
        store.set_trainable(path, path in tuned or head)
    for adapter in model.adapters:
        for path in adapter.paths:
            store.set_trainable(path, True)


def apply_spec(model: MambaModel, spec: PeftSpec, seed: int = 0) -> AdapterState:
    store, cfg = model.store, model.cfg
    if not store.pretrained:
        store.snapshot_pretrained()
    adapter = ADAPTERS[spec.method](spec, cfg)
    if any(a.spec.prefix == spec.prefix for a in model.adapters):
        raise ConfigError(f"{spec.key} is already applied")
    rng = np.random.default_rng([seed, zlib.crc32(spec.prefix.encode())])
    adapter.attach(store, cfg, rng)
    model.adapters.append(adapter)
    refresh_trainable(model)
    return adapter


def apply_specs(model: MambaModel, specs: Sequence[PeftSpec], seed: int = 0, train_head: bool | None = None) -> list[AdapterState]:
    if train_head is not None:
        model.train_head = train_head
    out = [apply_spec(model, spec, seed) for spec in specs]
    refresh_trainable(model)
    return out


def remove_adapter(model: MambaModel, adapter: AdapterState) -> None:
    adapter.detach(model.store)
    model.adapters.remove(adapter)
    refresh_trainable(model)


def merge_adapter(model: MambaModel, adapter: AdapterState) -> None:
    if not adapter.mergeable:
        raise ConfigError(f"{adapter.spec.key} is not mergeable")
    idx = model.adapters.index(adapter)
    replacement = adapter.merge(model.store, model.cfg)
    if replacement is None:
        del model.adapters[idx]
    else:
        model.adapters[idx] = replacement
    refresh_trainable(model)


def merge_mergeable(model: MambaModel) -> int:
    """Fold every mergeable adapter into plain weights/tokens; returns how many."""
    targets = [a for a in model.adapters if a.mergeable]
    for adapter in targets:
        merge_adapter(model, adapter)
    return len(targets)


def path_overrides(model: MambaModel) -> dict[str, tuple[float | None, float | None]]:
    out = {}
    for adapter in model.adapters:
        out.update(adapter.overrides())
    return out


# convenience wrappers, one per method


def apply_lora(model, target: str, r: int = 8, s: float = 0.1, **kw) -> AdapterState:
    return apply_spec(model, PeftSpec("LoRA", target=target, r=r, s=s, **kw))


def apply_partial_lora(model, slice_name: str, r: int = 8, s: float = 0.1, **kw) -> AdapterState:
    return apply_spec(model, PeftSpec("PartialLoRA", target=slice_name, r=r, s=s, **kw))


def apply_parallel_adapter(model, r: int = 8, s: float = 0.1, **kw) -> AdapterState:
    return apply_spec(model, PeftSpec("ParallelAdapter", r=r, s=s, **kw))


def apply_prompt_tuning(model, n: int = 1, placement: str = "prefix+suffix", **kw) -> AdapterState:
    return apply_spec(model, PeftSpec("PromptTuning", n=n, placement=placement, **kw))


def apply_affix_tuning(model, n: int = 1, position: str = "after_inproj", placement: str = "prefix", **kw) -> AdapterState:
    return apply_spec(model, PeftSpec("AffixTuning", n=n, position=position, placement=placement, **kw))


def extend_additional_scan(model, n_prime: int = 1, where: str = "top", init: str = "neighbor", **kw) -> AdapterState:
    return apply_spec(model, PeftSpec("AdditionalScan", n_prime=n_prime, placement=where, init=init, **kw))


def set_partial_tuning(model, target: str, **kw) -> AdapterState:
    return apply_spec(model, PeftSpec("PartialTuning", target=target, **kw))


def anchored_weight_decay_grad(W, W_pre, lam: float = DEFAULT_ANCHOR_WD) -> np.ndarray:
    """Gradient of ``lam * ||W - W_pre||^2``."""
    W, W_pre = np.asarray(W, dtype=np.float64), np.asarray(W_pre, dtype=np.float64)
    if W.shape != W_pre.shape:
        raise ConfigError(f"anchor shape {W_pre.shape} != weight shape {W.shape}")
    if lam < 0:
        raise ConfigError(f"decay strength must be >= 0, got {lam}")
    return 2.0 * lam * (W - W_pre)


# --- the 20 searchable variants -------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    spec: PeftSpec = field(compare=False)


def _v(name: str, method: str, **kw) -> Variant:
    return Variant(name, PeftSpec(method, **kw))


# minimal fixed hyperparameters used when combinations are searched
VARIANTS: tuple[Variant, ...] = (
    _v("Bias-tuning", "PartialTuning", target="bias", wd=1e-3),
    _v("A-tuning", "PartialTuning", target="A", wd=1e-3),
    _v("D-tuning", "PartialTuning", target="D", wd=1e-3),
    _v("Conv1d-tuning", "PartialTuning", target="conv1d", wd=1e-3),
    _v("CLS-token-tuning", "PartialTuning", target="cls_token", wd=1e-3),
    _v("Pos-embed-tuning", "PartialTuning", target="pos_embed", wd=1e-3),
    _v("Prompt-tuning", "PromptTuning", n=1),
    _v("Affix-tuning", "AffixTuning", n=1),
    _v("Additional-scan", "AdditionalScan", n_prime=1),
    _v("ParallelAdapter", "ParallelAdapter", r=8, s=0.1),
    _v("LoRA(embedding)", "LoRA", target="embedding", r=8, s=0.1),
    _v("LoRA(x_proj)", "LoRA", target="x_proj", r=8, s=0.1),
    _v("LoRA(dt_proj)", "LoRA", target="dt_proj", r=4, s=0.1),
    _v("LoRA(out_proj)", "LoRA", target="out_proj", r=8, s=0.1),
    _v("LoRA(in_proj)", "LoRA", target="in_proj", r=8, s=0.1),
    _v("LoRA_p(dt)", "PartialLoRA", target="dt", r=4, s=0.1),
    _v("LoRA_p(B)", "PartialLoRA", target="B", r=4, s=0.1),
    _v("LoRA_p(C)", "PartialLoRA", target="C", r=4, s=0.1),
    _v("LoRA_p(X)", "PartialLoRA", target="X", r=8, s=0.1),
    _v("LoRA_p(Z)", "PartialLoRA", target="Z", r=8, s=0.1),
)
VARIANT_NAMES = tuple(v.name for v in VARIANTS)


def variant_spec(name: str, **overrides) -> PeftSpec:
    for v in VARIANTS:
        if v.name == name:
            return replace(v.spec, **overrides)
    raise ConfigError(f"unknown PEFT variant {name!r}; valid: {', '.join(VARIANT_NAMES)}")


def usable_variants(cfg: MambaConfig) -> list[str]:
    """Variants whose targets exist for this config."""
    out = []
    for name in VARIANT_NAMES:
        spec = variant_spec(name)
        if spec.method == "PartialTuning" and spec.target == "cls_token" and not cfg.use_cls_token:
            continue
        if spec.method == "PartialTuning" and spec.target == "pos_embed" and not cfg.use_pos_embed:
            continue
        out.append(name)
    return out


def base_unchanged(store: ParamStore) -> bool:
    """Every non-adapter tensor equals its pretrained snapshot bit for bit."""
    return all(
        np.array_equal(store[p].data, store.pretrained[p]) for p in store.base_paths() if p in store.pretrained
    ) and all(is_peft_path(p) or p in store.pretrained for p in store)
