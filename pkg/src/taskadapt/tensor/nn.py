"""Parameter containers and layer primitives."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .autograd import DTYPE, Tensor
from .random import truncated_normal


class Parameter(Tensor):
    """A trainable leaf tensor. Optimizers replace ``data`` between graphs."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


class Module:
    """Minimal module tree: parameters, buffers and child modules by attribute order."""

    def __init__(self):
        object.__setattr__(self, "_buffers", OrderedDict())

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.array(value, dtype=DTYPE)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if self._buffers[name].shape != np.shape(value):
            raise ValueError(f"buffer {name!r} shape {self._buffers[name].shape} != {np.shape(value)}")
        self._buffers[name] = np.array(value, dtype=DTYPE)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Module, str]]:
        for key in self._buffers:
            yield prefix + key, self, key
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        for name, owner, key in self.named_buffers():
            state[name] = owner._buffers[key].copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = set()
        for name, p in self.named_parameters():
            expected.add(name)
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if np.shape(state[name]) != p.shape:
                raise ValueError(f"parameter {name!r}: shape {np.shape(state[name])} != {p.shape}")
            p.data = np.array(state[name], dtype=DTYPE)
        for name, owner, key in self.named_buffers():
            expected.add(name)
            if name not in state:
                raise KeyError(f"missing buffer {name!r}")
            owner.set_buffer(key, state[name])
        extra = set(state) - expected
        if extra:
            raise KeyError(f"unexpected entries: {sorted(extra)}")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int,
                 bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(truncated_normal(rng, (in_features, out_features), gain / np.sqrt(in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ResidualLinear(Linear):
    """Fully connected layer with an identity skip: ``x + x @ W + b``."""

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, ops.linear(x, self.weight, self.bias))


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, pad: int = 0, bias: bool = True, gain: float = 1.0):
        super().__init__()
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(truncated_normal(rng, (out_channels, in_channels, kernel, kernel), gain / np.sqrt(fan_in)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    """Batch norm with learned affine parameters and running statistics.

    ``train=True`` normalises with the batch statistics and, when a ``stats``
    list is passed, appends ``(module, mean, var)`` so the caller can apply the
    running-average update at a point of its choosing.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, train: bool = False, stats: list | None = None) -> Tensor:
        if not train:
            return ops.batch_norm(x, self._buffers["running_mean"], self._buffers["running_var"],
                                  self.scale, self.shift, self.eps)
        out, mu, var = ops.batch_norm_train(x, self.scale, self.shift, self.eps)
        if stats is not None:
            stats.append((self, mu, var))
        return out

    def update_running(self, mu: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mu
        self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * var


def apply_stats(stats: list) -> None:
    """Apply recorded batch-norm statistics in recording order."""
    for module, mu, var in stats:
        module.update_running(mu, var)
