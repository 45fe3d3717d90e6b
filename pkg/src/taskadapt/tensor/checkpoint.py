"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic          8 bytes   b"TADPCKPT"
    version        u32       FORMAT_VERSION
    meta_len       u32       length of the metadata block
    meta           bytes     UTF-8 JSON, sorted keys (architecture, config, notes)
    n_params       u32       number of parameter entries
    entries        ...       parameter table, see below
    opt_len        u32       length of optimizer scalar block
    opt_meta       bytes     UTF-8 JSON of optimizer scalars (empty object if none)
    n_opt          u32       number of optimizer buffer entries
    entries        ...       optimizer buffer table ("<param>/<slot>" names)
    rng_len        u32       length of RNG state block
    rng            bytes     UTF-8 JSON of the Philox bit-generator state (or null)

Each table entry is::

    name_len       u16
    name           bytes     UTF-8
    ndim           u8
    dims           ndim x u32
    payload        prod(dims) x f64 (little-endian IEEE-754)

Entries keep insertion order, so save -> load -> save is byte-stable.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TADPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    opt_meta: dict = field(default_factory=dict)
    opt_buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_state: dict | None = None


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_table(buf: io.BytesIO, table) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_table(buf: io.BytesIO) -> "OrderedDict[str, np.ndarray]":
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    table = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
        dims = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(_read_exact(buf, 8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        table[name] = arr
    return table


def _read_json(buf: io.BytesIO):
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return json.loads(_read_exact(buf, n).decode("utf-8"))


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for block in (ckpt.meta,):
        raw = _dump_json(block)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    _write_table(buf, ckpt.params)
    raw = _dump_json(ckpt.opt_meta)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    _write_table(buf, ckpt.opt_buffers)
    raw = _dump_json(ckpt.rng_state)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _read_exact(buf, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    meta = _read_json(buf)
    params = _read_table(buf)
    opt_meta = _read_json(buf)
    opt_buffers = _read_table(buf)
    rng_state = _read_json(buf)
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(meta, params, opt_meta, opt_buffers, rng_state)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def optimizer_tables(opt) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Flatten an :class:`~taskadapt.tensor.optim.OptimState` into checkpoint tables."""
    if opt is None:
        return {}, OrderedDict()
    table = OrderedDict()
    for pname, slots in opt.buffers.items():
        for slot, arr in slots.items():
            table[f"{pname}/{slot}"] = arr
    return opt.scalars(), table


def restore_optimizer(opt_meta: dict, table) -> "object | None":
    from .optim import OptimState

    if not opt_meta:
        return None
    opt = OptimState(**opt_meta)
    for key, arr in table.items():
        pname, slot = key.rsplit("/", 1)
        opt.buffers.setdefault(pname, {})[slot] = np.array(arr)
    return opt
