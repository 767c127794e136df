"""``MPK1`` checkpoint files.

Layout::

    MPK1
    {"config": ..., "peft": [...], "train_head": ...}     one JSON line
    <path>\\t<shape>\\t<trainable 0|1>\\t<param|pretrained>  one line per array
    END
    <little-endian fp64 blob, arrays in header order>

Shapes are written as ``x``-joined dims (empty for 0-d).  Paths are sorted
so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .mamba import MambaConfig, MambaModel, init_params
from .peft import PeftSpec, apply_specs
from .store import ParamStore

MAGIC = b"MPK1"
END = b"END"
_DTYPE = np.dtype("<f8")


def _shape_str(shape) -> str:
    return "x".join(str(int(s)) for s in shape)


def _parse_shape(text: str, lineno: int) -> tuple[int, ...]:
    if text == "":
        return ()
    try:
        dims = tuple(int(s) for s in text.split("x"))
    except ValueError:
        raise CheckpointError(f"line {lineno}: bad shape {text!r}") from None
    if any(d < 0 for d in dims):
        raise CheckpointError(f"line {lineno}: negative dimension in {text!r}")
    return dims


def encode(store: ParamStore, meta: dict | None = None) -> bytes:
    rows, blobs = [], []
    for path in sorted(store.params):
        arr = store[path].data
        rows.append(f"{path}\t{_shape_str(arr.shape)}\t{int(store.trainable[path])}\tparam")
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    for path in sorted(store.pretrained):
        arr = store.pretrained[path]
        rows.append(f"{path}\t{_shape_str(arr.shape)}\t0\tpretrained")
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    head = [MAGIC, json.dumps(meta or {}, sort_keys=True).encode()]
    head += [r.encode() for r in rows]
    head.append(END)
    return b"\n".join(head) + b"\n" + b"".join(blobs)


def decode(raw: bytes) -> tuple[ParamStore, dict]:
    if not raw.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"bad magic {raw[:4]!r}; expected {MAGIC!r}")
    pos = len(MAGIC) + 1
    lines = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("header is truncated (no END line)")
        line = raw[pos:nl]
        pos = nl + 1
        if line == END:
            break
        lines.append(line.decode("utf-8"))
    if not lines:
        raise CheckpointError("header is missing the metadata line")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"line 2: bad metadata JSON: {exc}") from None
    entries = []
    for lineno, line in enumerate(lines[1:], start=3):
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] not in ("0", "1") or parts[3] not in ("param", "pretrained"):
            raise CheckpointError(f"line {lineno}: malformed header entry {line!r}")
        entries.append((parts[0], _parse_shape(parts[1], lineno), parts[2] == "1", parts[3]))
    expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape, _, _ in entries) * _DTYPE.itemsize
    blob = raw[pos:]
    if len(blob) != expected:
        raise CheckpointError(f"blob holds {len(blob)} bytes but the header declares {expected}")
    store = ParamStore()
    offset = 0
    for path, shape, trainable, kind in entries:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += count * _DTYPE.itemsize
        if kind == "param":
            if path in store:
                raise CheckpointError(f"duplicate parameter {path!r}")
            store.add(path, arr, trainable)
        else:
            arr.setflags(write=False)
            store.pretrained[path] = arr
    for path in store.pretrained:
        if path not in store:
            raise CheckpointError(f"pretrained snapshot for unknown parameter {path!r}")
        if store.pretrained[path].shape != store[path].shape:
            raise CheckpointError(f"snapshot shape disagrees with parameter {path!r}")
    return store, meta


def model_meta(model: MambaModel, extra: dict | None = None) -> dict:
    meta = {
        "config": model.cfg.to_dict(),
        "peft": [a.spec.to_dict() for a in model.adapters],
        "train_head": model.train_head,
    }
    meta.update(extra or {})
    return meta


def save_checkpoint(model: MambaModel, path, extra: dict | None = None) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model.store, model_meta(model, extra)))
    os.replace(tmp, path)


def load_store(path) -> tuple[ParamStore, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(raw)


def load_checkpoint(path) -> MambaModel:
    """Rebuild the model, its adapters and all values from a checkpoint."""
    loaded, meta = load_store(path)
    if "config" not in meta:
        raise CheckpointError("metadata has no model config")
    cfg = MambaConfig.from_dict(meta["config"])
    model = MambaModel(cfg, init_params(cfg, seed=0))
    model.store.pretrained = dict(loaded.pretrained)
    specs = [PeftSpec.from_dict(s) for s in meta.get("peft", [])]
    apply_specs(model, specs, train_head=bool(meta.get("train_head", False)))
    if set(model.store.params) != set(loaded.params):
        missing = sorted(set(model.store.params) ^ set(loaded.params))
        raise CheckpointError(f"checkpoint parameters disagree with its config/specs: {missing[:5]}")
    for path in loaded:
        target = model.store[path]
        if target.shape != loaded[path].shape:
            raise CheckpointError(f"shape of {path!r} is {loaded[path].shape}, config implies {target.shape}")
        target.data = loaded[path].data
        model.store.set_trainable(path, loaded.trainable[path])
    return model
