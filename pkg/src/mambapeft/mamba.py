"""Mamba (S6) blocks and the sequence classifier built from them.

Weights are stored ``[in, out]`` so every projection is ``x @ W``.  The
``x_proj`` output is laid out as ``[dt_low | B | C]`` with widths
``dt_rank, N, N``.  ``A`` is stored as positive reals and enters the
recurrence as ``exp(-dt * A)``.

Adapters never edit this module: they register callables at named hook
sites (see :data:`BLOCK_SITES` and :data:`MODEL_SITES`) and the forward
pass threads activations through them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .store import ParamStore

LINEAR_SITES = ("in_proj", "x_proj", "dt_proj", "out_proj")
FEATURE_SITES = ("X", "Z", "dt", "B", "C")
BLOCK_SITES = LINEAR_SITES + FEATURE_SITES + (
    "before_in_proj",
    "after_in_proj",
    "parallel_out_proj",
    "scan_extension",
)
MODEL_SITES = ("embedding", "tokens")

CLS_POSITIONS = ("front", "middle")


@dataclass
class MambaConfig:
    d_model: int = 64
    expand: int = 2
    d_state: int = 8
    dt_rank: int | None = None
    d_conv: int = 4
    n_layers: int = 2
    vocab_size: int = 8
    input_dim: int | None = None
    n_classes: int = 2
    use_cls_token: bool = True
    cls_position: str = "middle"
    use_pos_embed: bool = True
    max_seq_len: int = 64
    use_norm: bool = True

    def __post_init__(self):
        if self.dt_rank is None:
            self.dt_rank = math.ceil(self.d_model / 16)
        dims = {
            "d_model": self.d_model,
            "expand": self.expand,
            "d_state": self.d_state,
            "dt_rank": self.dt_rank,
            "d_conv": self.d_conv,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }
        for name, value in dims.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.dt_rank > self.d_inner:
            raise ConfigError(f"dt_rank {self.dt_rank} exceeds d_inner {self.d_inner}")
        if self.cls_position not in CLS_POSITIONS:
            raise ConfigError(f"cls_position must be one of {CLS_POSITIONS}, got {self.cls_position!r}")
        if self.input_dim is not None and self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MambaConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class BlockParams:
    in_proj: Tensor
    conv_weight: Tensor
    conv_bias: Tensor
    x_proj: Tensor
    dt_proj: Tensor
    dt_bias: Tensor
    A: Tensor
    D: Tensor
    out_proj: Tensor

    @classmethod
    def from_store(cls, store: ParamStore, layer: int) -> "BlockParams":
        p = f"layers.{layer}."
        return cls(
            in_proj=store[p + "in_proj.weight"],
            conv_weight=store[p + "conv1d.weight"],
            conv_bias=store[p + "conv1d.bias"],
            x_proj=store[p + "x_proj.weight"],
            dt_proj=store[p + "dt_proj.weight"],
            dt_bias=store[p + "dt_proj.bias"],
            A=store[p + "A"],
            D=store[p + "D"],
            out_proj=store[p + "out_proj.weight"],
        )

    @property
    def d_inner(self) -> int:
        return self.A.shape[0]

    @property
    def d_state(self) -> int:
        return self.A.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[0]


def block_paths(layer: int) -> list[str]:
    p = f"layers.{layer}."
    return [
        p + "in_proj.weight",
        p + "conv1d.weight",
        p + "conv1d.bias",
        p + "x_proj.weight",
        p + "dt_proj.weight",
        p + "dt_proj.bias",
        p + "A",
        p + "D",
        p + "out_proj.weight",
    ]


def s4d_real(d_inner: int, d_state: int, start: int = 1) -> np.ndarray:
    """``A[l, n] = n`` for ``n = start .. start + d_state - 1``."""
    return np.tile(np.arange(start, start + d_state, dtype=np.float64), (d_inner, 1))


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_params(cfg: MambaConfig, seed: int = 0) -> ParamStore:
    """Fresh weights, everything trainable."""
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    d, di, n, r, k = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank, cfg.d_conv
    if cfg.input_dim is None:
        store.add("embedding", rng.normal(size=(cfg.vocab_size, d)), True)
    else:
        store.add("embedding", uniform(cfg.input_dim, (cfg.input_dim, d)), True)
    if cfg.use_pos_embed:
        store.add("pos_embed", 0.02 * rng.normal(size=(cfg.max_seq_len, d)), True)
    if cfg.use_cls_token:
        store.add("cls_token", 0.02 * rng.normal(size=(1, d)), True)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        store.add(p + "in_proj.weight", uniform(d, (d, 2 * di)), True)
        store.add(p + "conv1d.weight", uniform(k, (k, di)), True)
        store.add(p + "conv1d.bias", np.zeros(di), True)
        store.add(p + "x_proj.weight", uniform(di, (di, r + 2 * n)), True)
        store.add(p + "dt_proj.weight", uniform(r, (r, di)), True)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di))
        store.add(p + "dt_proj.bias", inverse_softplus(dt), True)
        store.add(p + "A", s4d_real(di, n), True)
        store.add(p + "D", np.ones(di), True)
        store.add(p + "out_proj.weight", uniform(di, (di, d)), True)
    store.add("head.weight", uniform(d, (d, cfg.n_classes)), True)
    store.add("head.bias", np.zeros(cfg.n_classes), True)
    return store


def reset_head(store: ParamStore, cfg: MambaConfig, n_classes: int, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(cfg.d_model)
    for path in ("head.weight", "head.bias"):
        store.remove(path)
    store.add("head.weight", rng.uniform(-bound, bound, size=(cfg.d_model, n_classes)))
    store.add("head.bias", np.zeros(n_classes))
    cfg.n_classes = n_classes


# --- discretization and S6 --------------------------------------------------


def bilinear_discretize(A, B, d: float) -> tuple[np.ndarray, np.ndarray]:
    """``A_bar = (I - d/2 A)^-1 (I + d/2 A)``, ``B_bar = (I - d/2 A)^-1 d B``.

    Reference utility only; the model itself uses the exponential S6 form.
    Raises ``numpy.linalg.LinAlgError`` when ``I - d/2 A`` is singular.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.asarray(B, dtype=np.float64)
    B2 = B.reshape(A.shape[0], -1)
    eye = np.eye(A.shape[0])
    lhs = eye - 0.5 * d * A
    a_bar = np.linalg.solve(lhs, eye + 0.5 * d * A)
    b_bar = np.linalg.solve(lhs, d * B2)
    return a_bar, b_bar.reshape(B.shape) if B.ndim else b_bar


def _lift(t: Tensor, ndim: int) -> Tensor:
    """Prepend size-1 dims so ``t`` has rank ``ndim``."""
    if t.ndim == ndim:
        return t
    return ad.reshape(t, (1,) * (ndim - t.ndim) + t.shape)


def _expand_last(t: Tensor) -> Tensor:
    return ad.reshape(t, t.shape + (1,))


def discretize(dt: Tensor, A: Tensor, Bm: Tensor) -> tuple[Tensor, Tensor]:
    """``A_bar = exp(-dt o A)`` and ``B_bar = dt o B`` on ``[..., T, L, N]``."""
    dt4 = _expand_last(dt)
    a_bar = ad.exp(ad.neg(dt4 * _lift(A, dt4.ndim)))
    b_bar = dt4 * ad.reshape(Bm, Bm.shape[:-1] + (1, Bm.shape[-1]))
    return a_bar, b_bar


def _run(fns: Sequence[Callable], x: Tensor, y: Tensor) -> Tensor:
    for fn in fns:
        y = fn(x, y)
    return y


def s6_inputs(x: Tensor, p: BlockParams, hooks: "BlockHooks | None" = None) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``(dt [..., T, L], B [..., T, N], C [..., T, N])``."""
    h = hooks or BlockHooks()
    r, n = p.dt_rank, p.d_state
    xdbl = _run(h.sites["x_proj"], x, ad.matmul(x, p.x_proj))
    dt_low = _run(h.sites["dt"], x, ad.slice_last(xdbl, 0, r))
    Bm = _run(h.sites["B"], x, ad.slice_last(xdbl, r, r + n))
    Cm = _run(h.sites["C"], x, ad.slice_last(xdbl, r + n, r + 2 * n))
    dt_pre = _run(h.sites["dt_proj"], dt_low, ad.matmul(dt_low, p.dt_proj))
    dt = ad.softplus(dt_pre + _lift(p.dt_bias, dt_pre.ndim))
    return dt, Bm, Cm


def s6_compute(x: Tensor, p: BlockParams, hooks: "BlockHooks | None" = None):
    """Selective parameters for the inner stream ``x[..., T, d_inner]``.

    Returns ``(A_bar, B_bar, C, dt)`` with ``A_bar, B_bar [..., T, L, N]``,
    ``C [..., T, N]`` and ``dt [..., T, L]``.  The block itself feeds
    ``dt, B, C`` to the fused :func:`~mambapeft.autodiff.s6_scan`, which
    computes the same discretization without recording it.
    """
    dt, Bm, Cm = s6_inputs(x, p, hooks)
    a_bar, b_bar = discretize(dt, p.A, Bm)
    return a_bar, b_bar, Cm, dt


def selective_scan(a_bar, b_bar, c, x, d=None, return_states: bool = False):
    return ad.selective_scan(a_bar, b_bar, c, x, d, return_states=return_states)


# --- hooks --------------------------------------------------------------------


class BlockHooks:
    """Callables registered at named sites inside one block.

    Signatures by site:

    * linear and feature sites: ``fn(input, output) -> output``
    * ``before_in_proj`` / ``after_in_proj``: ``fn(seq) -> (seq, positions)``;
      the block drops ``positions`` again downstream
    * ``parallel_out_proj``: ``fn(h) -> delta`` added to the out_proj output
    * ``scan_extension``: ``fn() -> (A_ext, W_B, W_C)`` extra state dims
    """

    def __init__(self):
        self.sites: dict[str, list[Callable]] = {s: [] for s in BLOCK_SITES}

    def add(self, site: str, fn: Callable) -> None:
        if site not in self.sites:
            raise ConfigError(f"unknown hook site {site!r}; valid sites: {', '.join(BLOCK_SITES)}")
        self.sites[site].append(fn)

    def __bool__(self) -> bool:
        return any(self.sites.values())


class ModelHooks:
    def __init__(self, n_layers: int):
        self.sites: dict[str, list[Callable]] = {s: [] for s in MODEL_SITES}
        self.layers = [BlockHooks() for _ in range(n_layers)]

    def add(self, site: str, fn: Callable, layer: int | None = None) -> None:
        if layer is not None:
            if not 0 <= layer < len(self.layers):
                raise ConfigError(f"layer {layer} out of range for {len(self.layers)} layers")
            self.layers[layer].add(site, fn)
            return
        if site not in self.sites:
            raise ConfigError(f"unknown model hook site {site!r}; valid sites: {', '.join(MODEL_SITES)}")
        self.sites[site].append(fn)


def mamba_block_forward(
    u: Tensor, p: BlockParams, hooks: BlockHooks | None = None, trace: dict | None = None, norm: bool = False
) -> Tensor:
    """One residual Mamba block on ``u[..., T, d_model]``.

    With ``norm`` the mixer sees ``rms_norm(u)`` while the residual adds to
    the raw ``u`` (pre-norm).
    """
    h = hooks or BlockHooks()
    di = p.d_inner
    seq = ad.rms_norm(u) if norm else u
    before = []
    for fn in h.sites["before_in_proj"]:
        seq, pos = fn(seq)
        before.append(pos)
    xz = _run(h.sites["in_proj"], seq, ad.matmul(seq, p.in_proj))
    X = _run(h.sites["X"], seq, ad.slice_last(xz, 0, di))
    Z = _run(h.sites["Z"], seq, ad.slice_last(xz, di, 2 * di))
    after = []
    for fn in h.sites["after_in_proj"]:
        X, pos = fn(X)
        after.append(pos)
    X = ad.silu(ad.causal_depthwise_conv1d(X, p.conv_weight, p.conv_bias))
    dt, Bm, Cm = s6_inputs(X, p, h)
    Y, states = ad.s6_scan(dt, p.A, Bm, Cm, X, p.D, return_states=True)
    ext_states = []
    for fn in h.sites["scan_extension"]:
        A_ext, W_B, W_C = fn()
        Y_e, s_e = ad.s6_scan(dt, A_ext, ad.matmul(X, W_B), ad.matmul(X, W_C), X, None, return_states=True)
        Y = Y + Y_e
        ext_states.append(s_e)
    if trace is not None:
        trace.setdefault("states", []).append(states)
        trace.setdefault("extension_states", []).append(ext_states)
    for pos in reversed(after):
        Y = ad.drop_time(Y, pos)
    gated = Y * ad.silu(Z)
    for pos in reversed(before):
        gated = ad.drop_time(gated, pos)
    out = _run(h.sites["out_proj"], gated, ad.matmul(gated, p.out_proj))
    for fn in h.sites["parallel_out_proj"]:
        out = out + fn(gated)
    return u + out


# --- full classifier ----------------------------------------------------------


def _as_batch(inputs, cfg: MambaConfig) -> np.ndarray:
    arr = np.asarray(inputs)
    if cfg.input_dim is None:
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
            raise ConfigError(f"token inputs must be an integer array [B, T], got {arr.dtype} {arr.shape}")
    else:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[-1] != cfg.input_dim:
            raise ConfigError(f"feature inputs must be [B, T, {cfg.input_dim}], got {arr.shape}")
    return arr


def cls_index(cfg: MambaConfig, T: int) -> int:
    return T // 2 if cfg.cls_position == "middle" else 0


def model_forward(inputs, store: ParamStore, cfg: MambaConfig, peft: Sequence = (), trace: dict | None = None) -> Tensor:
    """Logits ``[B, n_classes]`` for token ids ``[B, T]`` (or features ``[B, T, F]``)."""
    x = _as_batch(inputs, cfg)
    B, T = x.shape[:2]
    if T > cfg.max_seq_len:
        raise ConfigError(f"sequence too long: {T} > max_seq_len {cfg.max_seq_len}")
    hooks = ModelHooks(cfg.n_layers)
    for adapter in peft:
        adapter.install(hooks, store, cfg)

    if cfg.input_dim is None:
        seq = ad.embedding(x, store["embedding"])
    else:
        seq = ad.matmul(Tensor._wrap(x), store["embedding"])
    for fn in hooks.sites["embedding"]:
        seq = fn(x, seq)
    if cfg.use_pos_embed:
        pos = ad.take(store["pos_embed"], np.arange(T), axis=0)
        seq = seq + ad.reshape(pos, (1, T, cfg.d_model))

    # indices (in the current sequence) of the real tokens and of the cls token
    content = np.arange(T)
    cls_at = None
    if cfg.use_cls_token:
        cls_at = cls_index(cfg, T)
        seq = ad.insert_time(seq, store["cls_token"], [cls_at])
        content = ad.kept_positions(T + 1, [cls_at])
    for fn in hooks.sites["tokens"]:
        before_len = seq.shape[-2]
        seq, positions = fn(seq)
        survivors = ad.kept_positions(before_len + len(positions), positions)
        content = survivors[content]
        if cls_at is not None:
            cls_at = int(survivors[cls_at])

    for i in range(cfg.n_layers):
        seq = mamba_block_forward(seq, BlockParams.from_store(store, i), hooks.layers[i], trace, cfg.use_norm)

    if cls_at is not None:
        feat = ad.reshape(ad.take(seq, [cls_at], axis=1), (B, cfg.d_model))
    else:
        feat = ad.mean(ad.take(seq, content, axis=1), axis=1)
    if cfg.use_norm:
        feat = ad.rms_norm(feat)
    head_b = ad.reshape(store["head.bias"], (1, store["head.bias"].shape[0]))
    return ad.matmul(feat, store["head.weight"]) + head_b


@dataclass
class MambaModel:
    """Config, parameters and the list of active adapters.

    ``train_head`` keeps the classification head trainable while adapters
    are active (the backbone stays frozen either way).
    """

    cfg: MambaConfig
    store: ParamStore
    adapters: list = field(default_factory=list)
    train_head: bool = False

    @classmethod
    def create(cls, cfg: MambaConfig, seed: int = 0) -> "MambaModel":
        return cls(cfg, init_params(cfg, seed))

    def forward(self, inputs, trace: dict | None = None) -> Tensor:
        return model_forward(inputs, self.store, self.cfg, self.adapters, trace)

    __call__ = forward

    def predict(self, inputs) -> np.ndarray:
        with ad.no_grad():
            return self.forward(inputs).data.argmax(axis=1)
