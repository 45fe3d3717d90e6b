"""FiLM-modulated residual feature extractor.

The extractor holds the global parameters (conv kernels and batch-norm
layers). Task-specific :class:`FiLMParams` scale and shift the feature map
after each batch norm inside every residual block; the pre-processing stage
is left unmodulated unless ``film_preprocess`` is set.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import BatchNorm2d, Conv2d, Module, ModuleList, Tensor, ops
from .tensor.random import make_rng

BLOCK_KINDS = ("basic", "scaling")


@dataclass(frozen=True)
class ExtractorArch:
    """Shape of the residual extractor.

    ``stages`` is a sequence of ``(channels, block_kinds)``. A ``scaling``
    block halves the spatial size and may change the channel count; a
    ``basic`` block keeps both.
    """

    image_size: int = 8
    in_channels: int = 3
    pre_channels: int = 16
    pre_kernel: int = 3
    pre_stride: int = 1
    pre_pad: int = 1
    stages: tuple = ((16, ("basic", "basic")), (32, ("scaling", "basic")))
    film_preprocess: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        stages = tuple((int(c), tuple(kinds)) for c, kinds in self.stages)
        object.__setattr__(self, "stages", stages)
        for _, kinds in stages:
            for k in kinds:
                if k not in BLOCK_KINDS:
                    raise ValueError(f"unknown block kind {k!r}; expected one of {BLOCK_KINDS}")

    @classmethod
    def resnet18(cls) -> "ExtractorArch":
        """Full-width 84x84 configuration (used for parameter counting)."""
        return cls(image_size=84, in_channels=3, pre_channels=64, pre_kernel=5, pre_stride=2, pre_pad=1,
                   stages=((64, ("basic", "basic")), (128, ("scaling", "basic")),
                           (256, ("scaling", "basic")), (512, ("scaling", "basic"))))

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorArch":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown arch keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [[c, list(k)] for c, k in self.stages]
        return d

    def blocks(self) -> list[tuple[str, int, int]]:
        """``(kind, in_channels, out_channels)`` for every block in order."""
        out, prev = [], self.pre_channels
        for channels, kinds in self.stages:
            for kind in kinds:
                out.append((kind, prev, channels))
                prev = channels
        return out

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][0] if self.stages else self.pre_channels

    def film_channels(self) -> list[int]:
        """Channel count of every FiLM layer, in application order."""
        chans = [self.pre_channels] if self.film_preprocess else []
        for _, _, c in self.blocks():
            chans += [c, c]
        return chans

    def spatial_sizes(self) -> list[int]:
        """Spatial size after pre-processing and after every block."""
        s = (self.image_size + 2 * self.pre_pad - self.pre_kernel) // self.pre_stride + 1
        sizes = [s]
        for kind, _, _ in self.blocks():
            if kind == "scaling":
                s = (s + 2 - 3) // 2 + 1
            sizes.append(s)
        return sizes

    def summary(self) -> str:
        lines = [f"input            {self.image_size}x{self.image_size}x{self.in_channels}"]
        sizes = self.spatial_sizes()
        lines.append(f"pre-processing   {sizes[0]}x{sizes[0]}x{self.pre_channels}  conv {self.pre_kernel}x{self.pre_kernel} "
                     f"stride {self.pre_stride} pad {self.pre_pad}, batchnorm, relu"
                     + (", film" if self.film_preprocess else ""))
        for i, ((kind, cin, cout), s) in enumerate(zip(self.blocks(), sizes[1:])):
            lines.append(f"block {i:<2d} {kind:<8s} {s}x{s}x{cout}  (in {cin}, film x2)")
        film, total, ratio = film_param_count(self)
        lines.append(f"features         {self.feature_dim}")
        lines.append(f"film params      {film} of {total} ({100 * ratio:.3f}%)")
        return "\n".join(lines)


@dataclass
class FiLMParams:
    """Per-layer ``(gamma, beta)`` pairs in application order."""

    layers: list = field(default_factory=list)
    identity_element: bool = False

    @classmethod
    def identity(cls, arch: ExtractorArch) -> "FiLMParams":
        return cls([(Tensor(np.ones(c)), Tensor(np.zeros(c))) for c in arch.film_channels()], True)

    def validate(self, arch: ExtractorArch) -> None:
        chans = arch.film_channels()
        if len(self.layers) != len(chans):
            raise ValueError(f"expected {len(chans)} FiLM layers, got {len(self.layers)}")
        for i, ((g, b), c) in enumerate(zip(self.layers, chans)):
            if g.shape != (c,) or b.shape != (c,):
                raise ValueError(f"FiLM layer {i}: expected length {c}, got {g.shape}/{b.shape}")

    def is_identity(self) -> bool:
        return all(np.all(g.data == 1.0) and np.all(b.data == 0.0) for g, b in self.layers)

    def arrays(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(g.data, b.data) for g, b in self.layers]


def film(feature_map: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ops.film(feature_map, gamma, beta)


class ResidualBlock(Module):
    def __init__(self, rng, kind: str, in_channels: int, out_channels: int, eps: float, momentum: float):
        super().__init__()
        if kind == "basic" and in_channels != out_channels:
            raise ValueError(f"basic block cannot change channels ({in_channels} -> {out_channels})")
        self.kind = kind
        stride = 2 if kind == "scaling" else 1
        gain = np.sqrt(2.0)
        self.conv1 = Conv2d(rng, in_channels, out_channels, 3, stride=stride, pad=1, bias=False, gain=gain)
        self.bn1 = BatchNorm2d(out_channels, eps, momentum)
        self.conv2 = Conv2d(rng, out_channels, out_channels, 3, stride=1, pad=1, bias=False, gain=gain)
        self.bn2 = BatchNorm2d(out_channels, eps, momentum)
        if kind == "scaling":
            self.down_conv = Conv2d(rng, in_channels, out_channels, 1, stride=2, pad=0, bias=False)
            self.down_bn = BatchNorm2d(out_channels, eps, momentum)
        else:
            self.down_conv = None
            self.down_bn = None


def block_forward(x: Tensor, block: ResidualBlock, film1=None, film2=None,
                  train: bool = False, stats: list | None = None) -> Tensor:
    """conv-BN-FiLM-ReLU-conv-BN-FiLM, add the (downsampled) input, ReLU."""
    h = block.bn1(block.conv1(x), train, stats)
    if film1 is not None:
        h = ops.film(h, *film1)
    h = ops.relu(h)
    h = block.bn2(block.conv2(h), train, stats)
    if film2 is not None:
        h = ops.film(h, *film2)
    skip = x if block.kind == "basic" else block.down_bn(block.down_conv(x), train, stats)
    if skip.shape != h.shape:
        raise ValueError(f"residual sum shape mismatch: skip {skip.shape} vs block output {h.shape}")
    return ops.relu(ops.add(h, skip))


class FeatureExtractor(Module):
    """Residual extractor ``x -> f(x; film)`` with frozen-after-pretraining semantics."""

    def __init__(self, arch: ExtractorArch, seed: int = 0):
        super().__init__()
        self.arch = arch
        rng = make_rng(seed, "extractor-init")
        self.pre_conv = Conv2d(rng, arch.in_channels, arch.pre_channels, arch.pre_kernel,
                               stride=arch.pre_stride, pad=arch.pre_pad, bias=False, gain=np.sqrt(2.0))
        self.pre_bn = BatchNorm2d(arch.pre_channels, arch.bn_eps, arch.bn_momentum)
        self.blocks = ModuleList(ResidualBlock(rng, kind, cin, cout, arch.bn_eps, arch.bn_momentum)
                                 for kind, cin, cout in arch.blocks())
        self.frozen = False

    def freeze(self) -> "FeatureExtractor":
        self.requires_grad_(False)
        self.frozen = True
        return self

    def _check_input(self, x: Tensor) -> None:
        a = self.arch
        if x.ndim != 4 or x.shape[1:] != (a.in_channels, a.image_size, a.image_size):
            raise ValueError(f"expected images of shape (N, {a.in_channels}, {a.image_size}, {a.image_size}), "
                             f"got {x.shape}")

    def _film_pairs(self, film_params: FiLMParams | None):
        n_pre = 1 if self.arch.film_preprocess else 0
        if film_params is None or film_params.identity_element:
            return None, [(None, None)] * len(self.blocks)
        film_params.validate(self.arch)
        layers = film_params.layers
        pre = layers[0] if n_pre else None
        body = layers[n_pre:]
        return pre, [(body[2 * i], body[2 * i + 1]) for i in range(len(self.blocks))]

    def preprocess(self, x: Tensor, pre_film=None, train: bool = False, stats: list | None = None) -> Tensor:
        self._check_input(x)
        if train and self.frozen:
            raise RuntimeError("extractor is frozen; batch norm must stay in eval mode")
        h = self.pre_bn(self.pre_conv(x), train, stats)
        if pre_film is not None:
            h = ops.film(h, *pre_film)
        return ops.relu(h)

    def run_block(self, i: int, h: Tensor, films=(None, None), train: bool = False, stats: list | None = None) -> Tensor:
        if train and self.frozen:
            raise RuntimeError("extractor is frozen; batch norm must stay in eval mode")
        return block_forward(h, self.blocks[i], films[0], films[1], train, stats)

    @staticmethod
    def pool(h: Tensor) -> Tensor:
        return ops.global_avg_pool(h)

    def extract(self, x: Tensor, film_params: FiLMParams | None = None, train: bool = False,
                stats: list | None = None, return_intermediates: bool = False):
        """Features ``(N, d_f)``; optionally also the activation after every stage.

        ``film_params=None`` is the unadapted extractor.
        """
        pre, pairs = self._film_pairs(film_params)
        h = self.preprocess(x, pre, train, stats)
        acts = [h]
        for i in range(len(self.blocks)):
            h = self.run_block(i, h, pairs[i], train, stats)
            acts.append(h)
        feats = self.pool(h)
        return (feats, acts) if return_intermediates else feats

    def __call__(self, x: Tensor, film_params: FiLMParams | None = None) -> Tensor:
        return self.extract(x, film_params)

    def digest(self) -> str:
        """SHA-256 over every parameter and buffer, for freeze checks."""
        h = hashlib.sha256()
        for name, arr in self.state_dict().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def theta_param_count(arch: ExtractorArch) -> int:
    """Trainable extractor parameters: conv kernels plus batch-norm scale/shift."""
    total = arch.in_channels * arch.pre_channels * arch.pre_kernel ** 2 + 2 * arch.pre_channels
    for kind, cin, cout in arch.blocks():
        total += cin * cout * 9 + cout * cout * 9 + 4 * cout
        if kind == "scaling":
            total += cin * cout + 2 * cout
    return total


def film_param_count(arch: ExtractorArch) -> tuple[int, int, float]:
    """``(film parameters, total parameters, film / total)``; total includes FiLM."""
    film_n = 2 * sum(arch.film_channels())
    total = theta_param_count(arch) + film_n
    return film_n, total, film_n / total
