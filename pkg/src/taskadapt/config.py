"""Run configuration: a YAML tree resolved into typed sections.

Every section and every key of a section must be present, so a run record
always carries the complete resolved configuration.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .active import ActiveTaskConfig
from .adaptation import AdaptationConfig
from .engine import MetaTrainConfig, PretrainConfig
from .episodes import TaskGenConfig
from .extractor import ExtractorArch


class ConfigError(KeyError):
    def __str__(self):
        return self.args[0] if self.args else "config error"


@dataclass(frozen=True)
class PretrainDataConfig:
    archive: str = ""          # dataset archive path; empty means generate the combo set
    n_colors: int = 8
    n_textures: int = 8
    per_class: int = 24


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 100        # per family
    split: str = "test"


@dataclass(frozen=True)
class ContinualConfig:
    family: str = "colors"
    splits: tuple = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))
    shots: int = 5
    targets: int = 10
    runs: int = 30
    split: str = "test"


@dataclass(frozen=True)
class ActiveConfig:
    family: str = "colors"
    task: ActiveTaskConfig = ActiveTaskConfig()
    iterations: int = 15
    k: int = 1
    seeds: int = 20
    target_accuracy: float = 0.8


SECTIONS = {
    "arch": ExtractorArch,
    "adaptation": AdaptationConfig,
    "tasks": TaskGenConfig,
    "pretrain_data": PretrainDataConfig,
    "pretrain": PretrainConfig,
    "metatrain": MetaTrainConfig,
    "eval": EvalConfig,
    "continual": ContinualConfig,
    "active": ActiveConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    arch: ExtractorArch
    adaptation: AdaptationConfig
    tasks: TaskGenConfig
    pretrain_data: PretrainDataConfig
    pretrain: PretrainConfig
    metatrain: MetaTrainConfig
    eval: EvalConfig
    continual: ContinualConfig
    active: ActiveConfig
    raw: dict

    def with_seed(self, seed: int) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return resolve(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _require(tree: dict, key: str, where: str):
    if not isinstance(tree, dict) or key not in tree:
        raise ConfigError(f"missing config key '{where}{key}'")
    return tree[key]


def _to_plain(obj):
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, tree: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(tree) - known
    if unknown:
        raise ConfigError(f"unknown config key '{where}{sorted(unknown)[0]}'")
    kwargs = {}
    for f in fields(cls):
        value = _require(tree, f.name, where)
        if cls is ActiveConfig and f.name == "task":
            value = _build(ActiveTaskConfig, value, where + "task.")
        elif cls is ContinualConfig and f.name == "splits":
            value = tuple(tuple(int(c) for c in s) for s in value)
        elif cls is ExtractorArch and f.name == "stages":
            value = tuple((int(c), tuple(k)) for c, k in value)
        kwargs[f.name] = value
    if cls is TaskGenConfig:
        return TaskGenConfig.from_dict(kwargs)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section '{where.rstrip('.')}': {exc}") from exc


def resolve(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(tree) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
    seed = int(_require(tree, "seed", ""))
    sections = {name: _build(cls, _require(tree, name, ""), name + ".") for name, cls in SECTIONS.items()}
    if sections["arch"].image_size != sections["tasks"].style.size:
        raise ConfigError(f"arch.image_size {sections['arch'].image_size} differs from "
                          f"tasks.style.size {sections['tasks'].style.size}")
    return RunConfig(seed=seed, raw=copy.deepcopy(tree), **sections)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        tree = yaml.safe_load(fh)
    return resolve(tree)


def to_tree(section) -> dict:
    """Plain nested dict for a config dataclass (used to write default configs)."""
    if hasattr(section, "to_dict"):
        return _to_plain(section.to_dict())
    out = {}
    for f in fields(section):
        v = getattr(section, f.name)
        out[f.name] = to_tree(v) if hasattr(v, "__dataclass_fields__") else _to_plain(v)
    return out


def default_tree(seed: int = 0) -> dict:
    tree = {"seed": seed}
    for name, cls in SECTIONS.items():
        tree[name] = to_tree(cls())
    return tree


def write_default(path, seed: int = 0) -> None:
    Path(path).write_text(yaml.safe_dump(default_tree(seed), sort_keys=False), encoding="utf-8")
