"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    Central differences at h = 1e-5 carry ~1e-11 round-off for an O(1) loss,
    so coordinates with gradients below ``floor`` are judged on absolute error.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator,
                    probes: int = 64, h: float = 1e-5) -> list[dict]:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current ``param.data`` on each call.
    Up to ``probes`` coordinates are drawn per parameter (all of them when the
    parameter is smaller). Returns one record per probe.
    """
    loss = fn()
    analytic = backward(loss, params)
    records = []
    for pi, (p, g) in enumerate(zip(params, analytic)):
        flat_n = p.data.size
        coords = np.arange(flat_n) if flat_n <= probes else rng.choice(flat_n, size=probes, replace=False)
        for k in coords:
            idx = np.unravel_index(int(k), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = fn().item()
            p.data[idx] = orig - h
            down = fn().item()
            p.data[idx] = orig
            numeric = (up - down) / (2 * h)
            records.append({"param": pi, "name": p.name, "index": idx, "analytic": float(g[idx]),
                            "numeric": numeric, "rel_error": relative_error(float(g[idx]), numeric)})
    return records


def max_relative_error(records: list[dict]) -> float:
    return max((r["rel_error"] for r in records), default=0.0)
