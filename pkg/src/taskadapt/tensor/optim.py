"""SGD with momentum and Adam over named parameter lists."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import DTYPE
from .nn import Parameter


@dataclass
class OptimState:
    kind: str
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    def scalars(self) -> dict:
        return {"kind": self.kind, "learning_rate": self.learning_rate, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step_count": self.step_count}


def sgd(learning_rate: float, momentum: float = 0.9, weight_decay: float = 0.0) -> OptimState:
    return OptimState("sgd-momentum", learning_rate, momentum=momentum, weight_decay=weight_decay)


def adam(learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
         weight_decay: float = 0.0) -> OptimState:
    return OptimState("adam", learning_rate, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


def step(params: dict[str, Parameter], grads: dict[str, np.ndarray], opt: OptimState) -> None:
    """Update ``params`` in place from ``grads`` and advance ``opt``.

    Weight decay is added to the gradient (classic L2). Adam uses bias
    correction on both moments.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, parameter is {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    opt.step_count += 1
    t = opt.step_count
    lr = opt.learning_rate
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=DTYPE)
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        buf = opt.buffers.setdefault(name, {})
        if opt.kind == "sgd-momentum":
            if opt.momentum:
                v = buf.get("momentum")
                v = g.copy() if v is None else opt.momentum * v + g
                buf["momentum"] = v
                g = v
            p.data = p.data - lr * g
        else:
            m = buf.get("m", np.zeros_like(p.data))
            v = buf.get("v", np.zeros_like(p.data))
            m = opt.beta1 * m + (1 - opt.beta1) * g
            v = opt.beta2 * v + (1 - opt.beta2) * g * g
            buf["m"], buf["v"] = m, v
            mhat = m / (1 - opt.beta1 ** t)
            vhat = v / (1 - opt.beta2 ** t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + opt.eps)
