"""Episode sampling: few-shot tasks drawn from image families."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import DEFAULT_FAMILIES, Family, FamilySpec, ImageStyle, LabeledImages


@dataclass
class Episode:
    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    way: int
    family: str = ""
    classes: tuple = ()     # source class ids behind labels 0..way-1

    def __post_init__(self):
        self.context_y = np.asarray(self.context_y, dtype=np.int64)
        self.target_y = np.asarray(self.target_y, dtype=np.int64)
        present = set(np.unique(self.context_y).tolist())
        if present != set(range(self.way)):
            raise ValueError(f"context labels must cover 0..{self.way - 1}, got {sorted(present)}")
        if not set(np.unique(self.target_y).tolist()) <= present:
            raise ValueError("target labels must be a subset of the context labels")

    @property
    def shots(self) -> np.ndarray:
        return np.bincount(self.context_y, minlength=self.way)


@dataclass(frozen=True)
class TaskGenConfig:
    families: tuple = DEFAULT_FAMILIES
    style: ImageStyle = ImageStyle()
    way_min: int = 2
    way_max: int = 5
    shot_min: int = 1
    shot_max: int = 5
    target_per_class: int = 5
    seed: int = 0           # fixes the class pools, not the episode stream

    def __post_init__(self):
        fams = tuple(f if isinstance(f, FamilySpec) else FamilySpec(**f) for f in self.families)
        object.__setattr__(self, "families", fams)
        if isinstance(self.style, dict):
            object.__setattr__(self, "style", ImageStyle(**self.style))
        if not fams:
            raise ValueError("at least one family is required")
        if not 2 <= self.way_min <= self.way_max:
            raise ValueError(f"need 2 <= way_min <= way_max, got [{self.way_min}, {self.way_max}]")
        if not 1 <= self.shot_min <= self.shot_max:
            raise ValueError(f"need 1 <= shot_min <= shot_max, got [{self.shot_min}, {self.shot_max}]")
        if self.target_per_class < 1:
            raise ValueError("target_per_class must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TaskGenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown task keys: {sorted(unknown)}")
        d = dict(d)
        if "families" in d:
            d["families"] = tuple(FamilySpec(**f) if isinstance(f, dict) else f for f in d["families"])
        if "style" in d and isinstance(d["style"], dict):
            d["style"] = ImageStyle(**d["style"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = [asdict(f) for f in self.families]
        return d

    def build(self) -> list:
        return [Family(spec, self.style, self.seed) for spec in self.families]


class ArchiveFamily:
    """A finite labelled image set used as an episode source.

    ``splits`` maps a split name to the source class ids it owns.
    """

    def __init__(self, name: str, data: LabeledImages, splits: dict):
        self.name_ = name
        self.data = data
        self.splits = {s: list(ids) for s, ids in splits.items()}
        self._index = {c: np.flatnonzero(data.labels == c) for c in range(data.num_classes)}

    @property
    def name(self) -> str:
        return self.name_

    def num_classes(self, split: str) -> int:
        return len(self.splits[split])

    def available(self, split: str, cls: int) -> int:
        return self._index[self.splits[split][cls]].size

    def draw(self, rng: np.random.Generator, split: str, cls: int, n: int) -> np.ndarray:
        idx = self._index[self.splits[split][cls]]
        if n > idx.size:
            raise ValueError(f"class {self.splits[split][cls]} has {idx.size} examples, {n} requested")
        return self.data.images[rng.choice(idx, size=n, replace=False)]


def draw_images(family, rng: np.random.Generator, split: str, cls: int, n: int) -> np.ndarray:
    """``n`` images of class ``cls``: fresh renders, or distinct archive examples."""
    if hasattr(family, "draw"):
        return family.draw(rng, split, cls, n)
    return family.sample(rng, split, cls, n)


def sample_episode(cfg: TaskGenConfig, rng: np.random.Generator, split: str = "train", families=None,
                   family: int | None = None) -> Episode:
    """Draw one task: a family, a way C, a shot count, then C classes.

    Every class gets the same number of context and target images; the two
    sets never share an image.
    """
    families = cfg.build() if families is None else families
    fi = int(rng.integers(len(families))) if family is None else family
    fam = families[fi]
    pool = fam.num_classes(split)
    way = int(rng.integers(cfg.way_min, cfg.way_max + 1))
    if way > pool:
        raise ValueError(f"way {way} exceeds the {pool} {split} classes of family {fam.name!r}")
    shot = int(rng.integers(cfg.shot_min, cfg.shot_max + 1))
    need = shot + cfg.target_per_class
    classes = np.sort(rng.choice(pool, size=way, replace=False))
    if hasattr(fam, "available"):
        for c in classes:
            if fam.available(split, int(c)) < need:
                raise ValueError(f"class {int(c)} of family {fam.name!r} has {fam.available(split, int(c))} "
                                 f"examples but {need} are needed (shots + targets)")
    cx, tx = [], []
    for c in classes:
        imgs = draw_images(fam, rng, split, int(c), need)
        cx.append(imgs[:shot])
        tx.append(imgs[shot:])
    labels = np.arange(way)
    return Episode(np.concatenate(cx), np.repeat(labels, shot), np.concatenate(tx),
                   np.repeat(labels, cfg.target_per_class), way, fam.name, tuple(int(c) for c in classes))


def episode_stream(cfg: TaskGenConfig, rng: np.random.Generator, split: str = "train", families=None):
    families = cfg.build() if families is None else families
    while True:
        yield sample_episode(cfg, rng, split, families)


def fixed_episodes(cfg: TaskGenConfig, rng: np.random.Generator, n: int, split: str, families=None,
                   per_family: bool = True) -> dict:
    """``{family name: [episodes]}``, ``n`` per family when ``per_family``."""
    families = cfg.build() if families is None else families
    out = {f.name: [] for f in families}
    if per_family:
        for fi, f in enumerate(families):
            out[f.name] = [sample_episode(cfg, rng, split, families, family=fi) for _ in range(n)]
    else:
        for _ in range(n):
            ep = sample_episode(cfg, rng, split, families)
            out[ep.family].append(ep)
    return out
