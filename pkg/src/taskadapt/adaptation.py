"""Adaptation networks: context set -> task-specific parameters.

* :class:`GlobalEncoder` pools a small conv stack over the context images
  into a task embedding ``z_G``.
* :class:`ARBlockEncoder` pools the adapted activations entering a block
  into ``z_AR`` for that block.
* :class:`BlockFiLMGenerator` maps ``concat(z_G, z_AR)`` to the two
  ``(gamma, beta)`` pairs of a residual block as
  ``gamma = 1 + R_gamma * h_gamma(z)`` and ``beta = R_beta * h_beta(z)``.
* :class:`ClassifierGenerator` maps a class mean feature ``z_c`` to a weight
  column ``z_c + mlp_w(z_c)`` and a bias ``mlp_b(z_c)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .extractor import ExtractorArch, FeatureExtractor, FiLMParams
from .tensor import BatchNorm2d, Conv2d, Linear, Module, ModuleList, Parameter, ResidualLinear, Tensor, ops
from .tensor.random import make_rng

MODES = ("ar", "no_ar", "no_film")


@dataclass(frozen=True)
class AdaptationConfig:
    d_global: int = 64
    encoder_channels: tuple = (16, 32, 64)
    r_init: float = 0.001
    penalty: float = 0.001
    mode: str = "ar"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.mode not in MODES:
            raise ValueError(f"unknown adaptation mode {self.mode!r}; expected one of {MODES}")
        if self.encoder_channels[-1] != self.d_global:
            raise ValueError(f"last encoder width {self.encoder_channels[-1]} must equal d_global {self.d_global}")

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown adaptation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


class GlobalEncoder(Module):
    """conv3x3-BN-ReLU-maxpool stack, adaptive average pool, mean over the set."""

    def __init__(self, rng, in_channels: int, image_size: int, channels: tuple):
        super().__init__()
        size = image_size
        self.convs = ModuleList()
        self.bns = ModuleList()
        prev = in_channels
        for c in channels:
            if size < 2:
                raise ValueError(f"global encoder has too many pooling stages for {image_size}x{image_size} input")
            self.convs.append(Conv2d(rng, prev, c, 3, stride=1, pad=1, bias=False, gain=np.sqrt(2.0)))
            self.bns.append(BatchNorm2d(c))
            size //= 2
            prev = c
        self.out_dim = prev

    def encode_instances(self, x: Tensor, train: bool = False, stats: list | None = None) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = ops.max_pool2d(ops.relu(bn(conv(h), train, stats)))
        return ops.reshape(ops.adaptive_avg_pool2d(h, 1), (x.shape[0], self.out_dim))

    def __call__(self, x: Tensor, train: bool = False, stats: list | None = None) -> Tensor:
        return encode_global(x, self, train, stats)


def encode_global(context_images: Tensor, encoder: GlobalEncoder, train: bool = False,
                  stats: list | None = None) -> Tensor:
    if context_images.shape[0] < 1:
        raise ValueError("global encoder needs at least one context image")
    return ops.set_mean(encoder.encode_instances(context_images, train, stats))


class ARBlockEncoder(Module):
    """Per-instance residual MLP on pooled activations, instance mean, FC-ReLU."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.fc_in = Linear(rng, channels, channels)
        self.res1 = ResidualLinear(rng, channels, channels)
        self.res2 = ResidualLinear(rng, channels, channels)
        self.res3 = ResidualLinear(rng, channels, channels)
        self.fc_out = Linear(rng, channels, channels)

    def __call__(self, activations: Tensor) -> Tensor:
        return encode_ar(activations, self)


def encode_ar(stage_activations: Tensor, encoder: ARBlockEncoder) -> Tensor:
    if stage_activations.shape[0] < 1:
        raise ValueError("auto-regressive encoder needs at least one activation")
    h = ops.global_avg_pool(stage_activations)
    h = ops.relu(encoder.fc_in(h))
    h = ops.relu(encoder.res1(h))
    h = ops.relu(encoder.res2(h))
    h = encoder.res3(h)
    return ops.relu(encoder.fc_out(ops.set_mean(h)))


class FiLMNet(Module):
    """FC-ReLU, two residual FC-ReLU, one residual FC."""

    def __init__(self, rng, in_dim: int, out_dim: int):
        super().__init__()
        self.fc_in = Linear(rng, in_dim, out_dim)
        self.res1 = ResidualLinear(rng, out_dim, out_dim)
        self.res2 = ResidualLinear(rng, out_dim, out_dim)
        self.res3 = ResidualLinear(rng, out_dim, out_dim)

    def __call__(self, z: Tensor) -> Tensor:
        h = ops.relu(self.fc_in(z))
        h = ops.relu(self.res1(h))
        h = ops.relu(self.res2(h))
        return self.res3(h)


class FiLMPairGenerator(Module):
    """One FiLM layer's ``(gamma, beta)`` with learned gating vectors R."""

    def __init__(self, rng, in_dim: int, channels: int, r_init: float):
        super().__init__()
        self.h_gamma = FiLMNet(rng, in_dim, channels)
        self.h_beta = FiLMNet(rng, in_dim, channels)
        self.r_gamma = Parameter(np.full(channels, r_init))
        self.r_beta = Parameter(np.full(channels, r_init))

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        gamma = ops.add(1.0, ops.mul(self.r_gamma, self.h_gamma(z)))
        beta = ops.mul(self.r_beta, self.h_beta(z))
        return gamma, beta

    def penalty(self) -> Tensor:
        return ops.add(ops.sum(ops.square(self.r_gamma)), ops.sum(ops.square(self.r_beta)))


class BlockFiLMGenerator(Module):
    def __init__(self, rng, in_dim: int, channels: int, r_init: float):
        super().__init__()
        self.in_dim = in_dim
        self.conv1 = FiLMPairGenerator(rng, in_dim, channels, r_init)
        self.conv2 = FiLMPairGenerator(rng, in_dim, channels, r_init)

    def __call__(self, z: Tensor):
        return self.conv1(z), self.conv2(z)

    def pairs(self):
        return (self.conv1, self.conv2)


def generate_film(z_global: Tensor, z_ar: Tensor | None, gen: BlockFiLMGenerator):
    """The block's ``((gamma1, beta1), (gamma2, beta2))`` from ``concat(z_G, z_AR)``."""
    z = z_global if z_ar is None else ops.concat([z_global, z_ar], axis=0)
    if z.shape != (gen.in_dim,):
        raise ValueError(f"FiLM generator expects input of length {gen.in_dim}, got {z.shape}")
    return gen(z)


class ClassifierGenerator(Module):
    def __init__(self, rng, feature_dim: int):
        super().__init__()
        self.w_fc1 = Linear(rng, feature_dim, feature_dim)
        self.w_fc2 = Linear(rng, feature_dim, feature_dim)
        self.w_fc3 = Linear(rng, feature_dim, feature_dim)
        self.b_fc1 = Linear(rng, feature_dim, feature_dim)
        self.b_fc2 = Linear(rng, feature_dim, feature_dim)
        self.b_fc3 = Linear(rng, feature_dim, 1)
        self.feature_dim = feature_dim

    def __call__(self, z_c: Tensor) -> tuple[Tensor, Tensor]:
        return generate_classifier(z_c, self)


def generate_classifier(z_c: Tensor, gen: ClassifierGenerator) -> tuple[Tensor, Tensor]:
    """Weight column (d_f,) and scalar bias (1,) for one class representation."""
    if z_c.shape != (gen.feature_dim,):
        raise ValueError(f"class representation must have length {gen.feature_dim}, got {z_c.shape}")
    h = ops.elu(gen.w_fc1(z_c))
    h = ops.elu(gen.w_fc2(h))
    weight = ops.add(z_c, gen.w_fc3(h))
    hb = ops.elu(gen.b_fc1(z_c))
    hb = ops.elu(gen.b_fc2(hb))
    bias = gen.b_fc3(hb)
    return weight, bias


def class_representation(features: Tensor, labels, c: int) -> Tensor:
    """Mean adapted feature of the context examples labelled ``c``."""
    idx = np.flatnonzero(np.asarray(labels) == c)
    if idx.size == 0:
        raise ValueError(f"class {c} has no context examples")
    return ops.set_mean(ops.index(features, idx))


@dataclass
class TaskParams:
    psi_f: FiLMParams
    weights: Tensor        # (C, d_f)
    biases: Tensor         # (C,)
    class_reps: Tensor     # (C, d_f)
    global_rep: Tensor | None

    @property
    def way(self) -> int:
        return self.weights.shape[0]


class AdaptationNetworks(Module):
    """All adaptation parameters for one extractor architecture."""

    def __init__(self, arch: ExtractorArch, cfg: AdaptationConfig = AdaptationConfig(), seed: int = 0):
        super().__init__()
        self.arch = arch
        self.cfg = cfg
        rng = make_rng(seed, "adaptation-init")
        self.global_encoder = GlobalEncoder(rng, arch.in_channels, arch.image_size, cfg.encoder_channels)
        self.ar_encoders = ModuleList()
        self.film_generators = ModuleList()
        for _, cin, cout in arch.blocks():
            self.ar_encoders.append(ARBlockEncoder(rng, cin))
            self.film_generators.append(BlockFiLMGenerator(rng, cfg.d_global + cin, cout, cfg.r_init))
        self.pre_generator = (FiLMPairGenerator(rng, cfg.d_global, arch.pre_channels, cfg.r_init)
                              if arch.film_preprocess else None)
        self.classifier = ClassifierGenerator(rng, arch.feature_dim)

    def pair_generators(self) -> list[FiLMPairGenerator]:
        gens = [self.pre_generator] if self.pre_generator is not None else []
        for g in self.film_generators:
            gens.extend(g.pairs())
        return gens

    def penalty(self) -> Tensor:
        """``penalty * sum ||R||^2`` over every FiLM generator."""
        terms = [g.penalty() for g in self.pair_generators()]
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
        return ops.mul(total, self.cfg.penalty)

    def film_from_global(self, z_global: Tensor, extractor: FeatureExtractor) -> FiLMParams:
        """FiLM parameters from ``z_G`` alone (the auto-regressive inputs are zero)."""
        layers = []
        if self.pre_generator is not None:
            layers.append(self.pre_generator(z_global))
        for (_, cin, _), gen in zip(self.arch.blocks(), self.film_generators):
            p1, p2 = generate_film(z_global, Tensor(np.zeros(cin)), gen)
            layers += [p1, p2]
        return FiLMParams(layers)

    def adapt(self, context_x: Tensor, context_y, extractor: FeatureExtractor, mode: str | None = None,
              train: bool = False, stats: list | None = None) -> TaskParams:
        mode = mode or self.cfg.mode
        if mode not in MODES:
            raise ValueError(f"unknown adaptation mode {mode!r}")
        y = np.asarray(context_y, dtype=np.int64)
        if y.ndim != 1 or y.shape[0] != context_x.shape[0]:
            raise ValueError("context labels must be a vector matching the context images")
        way = int(y.max()) + 1 if y.size else 0
        if way < 2:
            raise ValueError(f"a task needs at least 2 classes, got {way}")
        for c in range(way):
            if not np.any(y == c):
                raise ValueError(f"class {c} has no context examples")

        if mode == "no_film":
            z_global = None
            psi_f = FiLMParams.identity(self.arch)
            feats = extractor.extract(context_x)
        else:
            z_global = encode_global(context_x, self.global_encoder, train, stats)
            layers = []
            pre_film = None
            if self.pre_generator is not None:
                pre_film = self.pre_generator(z_global)
                layers.append(pre_film)
            h = extractor.preprocess(context_x, pre_film)
            for i, ((_, cin, _), gen) in enumerate(zip(self.arch.blocks(), self.film_generators)):
                if mode == "ar":
                    z_ar = encode_ar(h, self.ar_encoders[i])
                else:
                    z_ar = Tensor(np.zeros(cin))
                p1, p2 = generate_film(z_global, z_ar, gen)
                layers += [p1, p2]
                h = extractor.run_block(i, h, (p1, p2))
            psi_f = FiLMParams(layers)
            feats = extractor.pool(h)

        reps, cols, biases = [], [], []
        for c in range(way):
            z_c = class_representation(feats, y, c)
            w, b = generate_classifier(z_c, self.classifier)
            reps.append(z_c)
            cols.append(w)
            biases.append(b)
        return TaskParams(psi_f=psi_f, weights=ops.stack(cols), biases=ops.concat(biases),
                          class_reps=ops.stack(reps), global_rep=z_global)
