"""Seeded counter-based random streams.

All sampling goes through Philox generators derived from one integer seed and
a tuple of stream labels, so any component can obtain an independent,
replayable stream without sharing state with others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed: int, *stream) -> np.random.Generator:
    """A Philox generator for ``seed`` and an optional stream path."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_key(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


def rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return _jsonable(state)


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = _from_jsonable(state)
    return np.random.Generator(bg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": [int(v) for v in obj.tolist()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
