"""Dense fp64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a :class:`Node` holding its inputs and a
closure mapping the upstream gradient to input gradients.  Nodes carry a
global sequence number, so sorting the reachable nodes by that number
recovers execution order and :func:`backward` walks it in reverse.

Broadcasting is deliberately narrow: operands must have the same rank and
each dimension must either match or be 1 (0-d scalars broadcast freely).
Anything else is a :class:`~mambapeft.errors.ShapeError`.
"""

from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "tensor",
    "no_grad",
    "set_debug",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "softplus",
    "sigmoid",
    "silu",
    "relu",
    "elementwise",
    "matmul",
    "reshape",
    "sum",
    "mean",
    "rms_norm",
    "slice_last",
    "concat",
    "take",
    "embedding",
    "insert_time",
    "drop_time",
    "concat_time",
    "causal_depthwise_conv1d",
    "selective_scan",
    "s6_scan",
    "softmax_cross_entropy",
]

_seq = itertools.count()
_state = threading.local()
_debug = os.environ.get("MAMBAPEFT_DEBUG", "") not in ("", "0")

SOFTPLUS_THRESHOLD = 20.0


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks on every forward op."""
    global _debug
    _debug = bool(enabled)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_error(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


class Graph:
    """Records reachable from an output, in execution order."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: set[int] = set()
        records: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            records.append(t)
            stack.extend(t.node.inputs)
        records.sort(key=lambda r: r.node.seq)
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.node.op for r in self.records]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for t in reversed(graph.records):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        input_grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
            if inp.node is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# --- elementwise -----------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b or len(b) == 0:
        return a
    if len(a) == 0:
        return b
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast shapes {a} and {b}: ranks differ")
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", a.data * b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def _softplus(x: np.ndarray) -> np.ndarray:
    mid = np.clip(x, -SOFTPLUS_THRESHOLD, SOFTPLUS_THRESHOLD)
    out = np.log1p(np.exp(mid))
    out = np.where(x > SOFTPLUS_THRESHOLD, x, out)
    return np.where(x < -SOFTPLUS_THRESHOLD, np.exp(x), out)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    return _result("softplus", _softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _result("silu", a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_UNARY = {"neg": neg, "exp": exp, "softplus": softplus, "sigmoid": sigmoid, "silu": silu, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _UNARY and len(inputs) == 1:
        return _UNARY[kind](inputs[0])
    if kind in _BINARY and len(inputs) == 2:
        return _BINARY[kind](*inputs)
    raise ValueError(f"unknown elementwise op {kind!r} with {len(inputs)} inputs")


# --- linear algebra and shape ops -------------------------------------------


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` act as a batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    k, n = b.shape

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def rms_norm(a, eps: float = 1e-5) -> Tensor:
    """``a / sqrt(mean(a^2) + eps)`` over the last axis (no learnable gain)."""
    a = _as_tensor(a)
    r = np.sqrt(np.mean(a.data * a.data, axis=-1, keepdims=True) + eps)
    y = a.data / r

    def bw(g):
        return ((g - y * np.mean(g * y, axis=-1, keepdims=True)) / r,)

    return _result("rms_norm", y, (a,), bw)


def slice_last(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    a = _as_tensor(a)
    if not 0 <= start <= stop <= a.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for last dim {a.shape[-1]}")
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        full[..., start:stop] = g
        return (full,)

    return _result("slice_last", a.data[..., start:stop], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", data, ts, bw)


def take(a, indices, axis: int) -> Tensor:
    """Gather positions ``indices`` along ``axis``."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise ShapeError(f"index out of range for axis of length {a.shape[ax]}")
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result("take", np.take(a.data, idx, axis=ax), (a,), bw)


def embedding(ids, weight) -> Tensor:
    """Row lookup ``weight[ids]``."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"token id out of range for table of {weight.shape[0]} rows")

    def bw(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result("embedding", weight.data[ids], (weight,), bw)


# --- time-axis insertion / removal ----------------------------------------
# The time axis is the second-to-last one, so [T, L] and [B, T, L] both work.


def _check_positions(positions, length: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.intp).reshape(-1)
    if pos.size and (np.any(np.diff(pos) <= 0) or pos[0] < 0 or pos[-1] >= length):
        raise ShapeError(f"positions {pos.tolist()} must be strictly increasing within [0, {length})")
    return pos


def kept_positions(total: int, removed) -> np.ndarray:
    mask = np.ones(total, dtype=bool)
    mask[np.asarray(removed, dtype=np.intp)] = False
    return np.flatnonzero(mask)


def insert_time(seq, tokens, positions) -> Tensor:
    """Insert ``tokens`` so that they land at ``positions`` of the output.

    ``tokens`` is ``[n, L]`` (shared across the batch) or has the same
    leading dims as ``seq``.
    """
    seq, tokens = _as_tensor(seq), _as_tensor(tokens)
    n = tokens.shape[-2] if tokens.ndim >= 2 else 0
    pos = np.asarray(positions, dtype=np.intp).reshape(-1)
    if pos.size != n:
        raise ShapeError(f"{n} tokens but {pos.size} positions")
    if n == 0:
        return seq
    total = seq.shape[-2] + n
    pos = _check_positions(pos, total)
    if tokens.shape[-1] != seq.shape[-1]:
        raise ShapeError(f"token width {tokens.shape[-1]} != sequence width {seq.shape[-1]}")
    keep = kept_positions(total, pos)
    lead = seq.shape[:-2]
    out = np.empty(lead + (total, seq.shape[-1]))
    out[..., keep, :] = seq.data
    out[..., pos, :] = tokens.data
    tok_shape = tokens.shape

    def bw(g):
        gs = g[..., keep, :] if seq.requires_grad else None
        gt = None
        if tokens.requires_grad:
            gt = g[..., pos, :]
            if gt.shape != tok_shape:
                gt = gt.reshape(-1, *tok_shape).sum(axis=0)
        return gs, gt

    return _result("insert_time", out, (seq, tokens), bw)


def drop_time(seq, positions) -> Tensor:
    seq = _as_tensor(seq)
    pos = _check_positions(positions, seq.shape[-2])
    if pos.size == 0:
        return seq
    return take(seq, kept_positions(seq.shape[-2], pos), axis=-2)


def concat_time(a, b) -> Tensor:
    return concat([a, b], axis=-2)


# --- sequence ops ----------------------------------------------------------


def causal_depthwise_conv1d(x, w, b) -> Tensor:
    """Per-channel causal convolution: ``out[t] = b + sum_k w[k] * x[t-K+1+k]``."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or w.shape[0] < 1:
        raise ShapeError(f"kernel must be [K>=1, L], got {w.shape}")
    K, L = w.shape
    if x.shape[-1] != L or b.shape != (L,):
        raise ShapeError(f"conv channel mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(K - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(b.data, x.shape).copy()
    for k in range(K):
        out += w.data[k] * xp[..., k : k + T, :]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for k in range(K):
                gxp[..., k : k + T, :] += w.data[k] * g
            gx = gxp[..., K - 1 :, :]
        if w.requires_grad:
            gw = np.stack([(g * xp[..., k : k + T, :]).reshape(-1, L).sum(axis=0) for k in range(K)])
        if b.requires_grad:
            gb = g.reshape(-1, L).sum(axis=0)
        return gx, gw, gb

    return _result("causal_depthwise_conv1d", out, (x, w, b), bw)


def selective_scan(a_bar, b_bar, c, x, d=None, return_states: bool = False):
    """Diagonal selective-scan recurrence.

    ``H_t = a_bar_t * H_{t-1} + b_bar_t * x_t`` with ``H_0 = 0`` and
    ``Y_t[l] = sum_n H_t[l, n] C_t[n] + d[l] x_t[l]``.

    Shapes: ``a_bar, b_bar [..., T, L, N]``, ``c [..., T, N]``,
    ``x [..., T, L]``, ``d [L]`` or None.  Recorded as a single tape node;
    the backward pass runs the adjoint recurrence in reverse time.
    With ``return_states`` the (detached) state trajectory
    ``[..., T, L, N]`` is returned alongside ``Y``.
    """
    a_bar, b_bar, c, x = (_as_tensor(t) for t in (a_bar, b_bar, c, x))
    inputs = [a_bar, b_bar, c, x]
    if d is not None:
        d = _as_tensor(d)
        inputs.append(d)
    T, L, N = a_bar.shape[-3:]
    lead = a_bar.shape[:-3]
    if b_bar.shape != a_bar.shape or c.shape != lead + (T, N) or x.shape != lead + (T, L):
        raise ShapeError(
            f"scan shapes disagree: a_bar {a_bar.shape}, b_bar {b_bar.shape}, c {c.shape}, x {x.shape}"
        )
    if d is not None and d.shape != (L,):
        raise ShapeError(f"skip gain must be [{L}], got {d.shape}")

    bx = b_bar.data * x.data[..., None]
    states = np.empty(a_bar.shape)
    h = np.zeros(lead + (L, N))
    for t in range(T):
        h = a_bar.data[..., t, :, :] * h + bx[..., t, :, :]
        states[..., t, :, :] = h
    y = (states * c.data[..., None, :]).sum(axis=-1)
    if d is not None:
        y = y + d.data * x.data

    def bw(g):
        g_direct = g[..., None] * c.data[..., None, :]
        g_states = np.empty(states.shape)
        carry = np.zeros(lead + (L, N))
        for t in range(T - 1, -1, -1):
            carry = g_direct[..., t, :, :] + carry
            g_states[..., t, :, :] = carry
            carry = carry * a_bar.data[..., t, :, :]
        ga = gb = gc = gx = gd = None
        if a_bar.requires_grad:
            ga = np.zeros(states.shape)
            ga[..., 1:, :, :] = g_states[..., 1:, :, :] * states[..., :-1, :, :]
        if b_bar.requires_grad:
            gb = g_states * x.data[..., None]
        if c.requires_grad:
            gc = (g[..., None] * states).sum(axis=-2)
        if x.requires_grad:
            gx = (g_states * b_bar.data).sum(axis=-1)
            if d is not None:
                gx = gx + g * d.data
        if d is not None and d.requires_grad:
            gd = (g * x.data).reshape(-1, L).sum(axis=0)
        return (ga, gb, gc, gx) + ((gd,) if d is not None else ())

    out = _result("selective_scan", y, inputs, bw)
    return (out, states) if return_states else out


def s6_scan(dt, A, Bm, c, x, d=None, return_states: bool = False):
    """Discretize and scan in one node.

    Equivalent to ``selective_scan(exp(-dt o A), dt o B, c, x, d)`` but never
    records the ``[..., T, L, N]`` intermediates.  Shapes: ``dt, x [..., T, L]``,
    ``A [L, N]``, ``Bm, c [..., T, N]``, ``d [L]`` or None.
    """
    dt, A, Bm, c, x = (_as_tensor(t) for t in (dt, A, Bm, c, x))
    inputs = [dt, A, Bm, c, x]
    if d is not None:
        d = _as_tensor(d)
        inputs.append(d)
    L, N = A.shape
    T = x.shape[-2]
    lead = x.shape[:-2]
    if dt.shape != x.shape or x.shape[-1] != L or Bm.shape != lead + (T, N) or c.shape != Bm.shape:
        raise ShapeError(f"s6 shapes disagree: dt {dt.shape}, A {A.shape}, B {Bm.shape}, C {c.shape}, x {x.shape}")
    if d is not None and d.shape != (L,):
        raise ShapeError(f"skip gain must be [{L}], got {d.shape}")

    a_bar = np.exp(-(dt.data[..., None] * A.data))
    dtx = dt.data * x.data
    states = dtx[..., None] * Bm.data[..., None, :]
    for t in range(1, T):
        cur = states[..., t, :, :]
        cur += a_bar[..., t, :, :] * states[..., t - 1, :, :]
    y = np.matmul(states, c.data[..., None])[..., 0]
    if d is not None:
        y = y + d.data * x.data

    def bw(g):
        g_states = g[..., None] * c.data[..., None, :]
        for t in range(T - 2, -1, -1):
            cur = g_states[..., t, :, :]
            cur += g_states[..., t + 1, :, :] * a_bar[..., t + 1, :, :]
        # gradient w.r.t. a_bar, folded through a_bar = exp(-dt A)
        ga = np.zeros(states.shape)
        np.multiply(g_states[..., 1:, :, :], states[..., :-1, :, :], out=ga[..., 1:, :, :])
        ga *= a_bar
        g_dtx = np.matmul(g_states, Bm.data[..., :, None])[..., 0]
        gdt = gA = gB = gc = gx = gd = None
        if dt.requires_grad:
            gdt = g_dtx * x.data - np.einsum("...ln,ln->...l", ga, A.data)
        if A.requires_grad:
            gA = -np.einsum("bl,bln->ln", dt.data.reshape(-1, L), ga.reshape(-1, L, N))
        if Bm.requires_grad:
            gB = np.matmul(dtx[..., None, :], g_states)[..., 0, :]
        if c.requires_grad:
            gc = np.matmul(g[..., None, :], states)[..., 0, :]
        if x.requires_grad:
            gx = g_dtx * dt.data
            if d is not None:
                gx = gx + g * d.data
        if d is not None and d.requires_grad:
            gd = (g * x.data).reshape(-1, L).sum(axis=0)
        return (gdt, gA, gB, gc, gx) + ((gd,) if d is not None else ())

    out = _result("s6_scan", y, inputs, bw)
    return (out, states) if return_states else out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[B, C]``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be [B, C>=2], got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"{labels.size} labels for batch of {B}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label out of range [0, {C})")
    top = logits.data.argmax(axis=1)
    z = logits.data - logits.data[np.arange(B), top][:, None]
    rest = np.exp(z)
    rest[np.arange(B), top] = 0.0
    # log(1 + rest) keeps tiny losses representable for large margins
    lse = np.log1p(rest.sum(axis=1))
    loss = np.mean(lse - z[np.arange(B), labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return _result("softmax_cross_entropy", np.asarray(loss), (logits,), bw)


# --- gradient checking -----------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    Uses fp64 central differences.  Any NaN/Inf on either side yields ``inf``.
    """
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    if loss.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    x.requires_grad, x.grad = saved_flag, saved_grad
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
