"""Procedural image-classification families.

Every image is an oriented stripe texture, at a random phase, painted in a
foreground colour over a flat background. The two meta-learning families
differ in which attribute names the class:

* ``colors``: the class is a colour; each instance draws a random texture.
* ``patterns``: the class is a texture (orientation, frequency); each
  instance draws a random colour.

The families also differ in background level, a dataset-wide covariate the
set encoder can pick up. The pretraining set ``combo`` labels every
(colour, texture) pair from a separate pool so the extractor has to encode
both attributes; which one matters is left to the per-task FiLM layers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor.random import make_rng

FAMILY_KINDS = ("colors", "patterns")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class FamilySpec:
    kind: str
    classes: dict = field(default_factory=lambda: {"train": 400, "val": 10, "test": 10})
    background: float = 0.15
    # minimum pairwise distance between class prototypes in each split
    spacing: dict = field(default_factory=lambda: {"train": 0.05, "val": 0.3, "test": 0.3})

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {FAMILY_KINDS}")
        missing = set(SPLITS) - set(self.classes)
        if missing:
            raise KeyError(f"family {self.kind!r} missing class counts for {sorted(missing)}")


DEFAULT_FAMILIES = (FamilySpec("colors", background=0.15), FamilySpec("patterns", background=0.85))


@dataclass(frozen=True)
class ImageStyle:
    size: int = 8
    noise: float = 0.08
    color_jitter: float = 0.04
    sharpness: float = 3.0
    freq_range: tuple = (0.12, 0.42)    # cycles per pixel
    min_contrast: float = 0.45          # foreground colour distance from background

    def __post_init__(self):
        object.__setattr__(self, "freq_range", tuple(float(f) for f in self.freq_range))


def stripes(theta: float, freq: float, phase: float, style: ImageStyle) -> np.ndarray:
    """Soft oriented stripe mask in [0, 1]."""
    yy, xx = np.mgrid[0:style.size, 0:style.size]
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return 1.0 / (1.0 + np.exp(-style.sharpness * wave))


def _texture_distance(a: np.ndarray, b: np.ndarray, style: ImageStyle) -> float:
    # orientation is periodic with period pi
    dtheta = abs(a[0] - b[0]) % np.pi
    dtheta = min(dtheta, np.pi - dtheta) / (np.pi / 2)
    lo, hi = style.freq_range
    return float(np.hypot(dtheta, abs(a[1] - b[1]) / (hi - lo)))


def _pool(rng, n: int, draw, dist, min_dist: float, what: str, max_tries: int = 200000) -> np.ndarray:
    out = []
    for _ in range(max_tries):
        if len(out) == n:
            break
        c = draw()
        if min_dist <= 0 or all(dist(c, o) >= min_dist for o in out):
            out.append(c)
    if len(out) < n:
        raise ValueError(f"could not place {n} {what} at distance {min_dist}")
    return np.array(out).reshape(n, -1)


def color_pool(rng: np.random.Generator, n: int, min_dist: float = 0.25) -> np.ndarray:
    """``n`` RGB colours in [0.05, 0.95]^3, pairwise at least ``min_dist`` apart."""
    return _pool(rng, n, lambda: rng.uniform(0.05, 0.95, size=3),
                 lambda a, b: float(np.linalg.norm(a - b)), min_dist, "colours")


def texture_pool(rng: np.random.Generator, n: int, style: ImageStyle, min_dist: float = 0.3) -> np.ndarray:
    """``n`` stripe textures as ``(orientation, frequency)`` rows."""
    lo, hi = style.freq_range
    return _pool(rng, n, lambda: np.array([rng.uniform(0, np.pi), rng.uniform(lo, hi)]),
                 lambda a, b: _texture_distance(a, b, style), min_dist, "textures")


def random_texture(rng: np.random.Generator, style: ImageStyle) -> np.ndarray:
    return texture_pool(rng, 1, style, 0.0)[0]


def contrasting_color(rng: np.random.Generator, background: float, style: ImageStyle) -> np.ndarray:
    for _ in range(10000):
        c = rng.uniform(0.05, 0.95, size=3)
        if np.linalg.norm(c - background) >= style.min_contrast:
            return c
    raise ValueError(f"no colour at distance {style.min_contrast} from background {background}")


def render(rng: np.random.Generator, color: np.ndarray, texture: np.ndarray, background: float,
           style: ImageStyle) -> np.ndarray:
    """One (3, H, W) image: a stripe texture at a random phase, painted over a background."""
    mask = stripes(texture[0], texture[1], rng.uniform(0, 2 * np.pi), style)
    c = np.clip(color + rng.normal(0.0, style.color_jitter, size=3), 0.0, 1.0)
    img = mask[None] * c[:, None, None] + (1.0 - mask[None]) * background
    return img + rng.normal(0.0, style.noise, size=img.shape)


class Family:
    """Class pools of one family, split into train/val/test classes."""

    def __init__(self, spec: FamilySpec, style: ImageStyle, seed: int):
        self.spec = spec
        self.style = style
        self.pools = {}
        for split in SPLITS:
            rng = make_rng(seed, "family", spec.kind, split)
            k, gap = spec.classes[split], spec.spacing.get(split, 0.0)
            if spec.kind == "colors":
                self.pools[split] = color_pool(rng, k, gap)
            else:
                self.pools[split] = texture_pool(rng, k, style, gap)

    @property
    def name(self) -> str:
        return self.spec.kind

    def num_classes(self, split: str) -> int:
        return len(self.pools[split])

    def sample(self, rng: np.random.Generator, split: str, cls: int, n: int) -> np.ndarray:
        """``n`` fresh images of class ``cls`` from ``split``; shape (n, 3, H, W)."""
        proto = self.pools[split][cls]
        out = np.empty((n, 3, self.style.size, self.style.size))
        for i in range(n):
            if self.spec.kind == "colors":
                color, texture = proto, random_texture(rng, self.style)
            else:
                color, texture = contrasting_color(rng, self.spec.background, self.style), proto
            out[i] = render(rng, color, texture, self.spec.background, self.style)
        return out


@dataclass
class LabeledImages:
    images: np.ndarray   # (N, C, H, W) float64
    labels: np.ndarray   # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on the example count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]


def combo_dataset(n_colors: int = 8, n_textures: int = 8, per_class: int = 24, style: ImageStyle = ImageStyle(),
                  seed: int = 0) -> LabeledImages:
    """Pretraining set: every (colour, texture) pair is a class; background is random per image."""
    rng = make_rng(seed, "combo")
    colors = color_pool(rng, n_colors, 0.4)
    textures = texture_pool(rng, n_textures, style, 0.4)
    k = n_colors * n_textures
    images = np.empty((k * per_class, 3, style.size, style.size))
    labels = np.repeat(np.arange(k), per_class)
    for idx, label in enumerate(labels):
        c, t = divmod(int(label), n_textures)
        bg = rng.uniform(0.0, 1.0)
        while np.linalg.norm(colors[c] - bg) < 0.25:
            bg = rng.uniform(0.0, 1.0)
        images[idx] = render(rng, colors[c], textures[t], bg, style)
    return LabeledImages(images, labels, k)


def separable_dataset(n: int = 64, size: int = 8, seed: int = 0) -> LabeledImages:
    """Two classes that differ in mean brightness; linearly separable."""
    rng = make_rng(seed, "separable")
    labels = np.arange(n) % 2
    images = rng.normal(0.0, 0.05, size=(n, 3, size, size)) + np.where(labels, 0.8, 0.2)[:, None, None, None]
    return LabeledImages(images, labels, 2)


def style_to_dict(style: ImageStyle) -> dict:
    return asdict(style)
