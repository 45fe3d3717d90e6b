"""Model checkpoints on top of the binary checkpoint container."""

from __future__ import annotations

from collections import OrderedDict

from .adaptation import AdaptationConfig, AdaptationNetworks
from .extractor import ExtractorArch, FeatureExtractor
from .tensor import checkpoint as ckpt
from .tensor.random import rng_state


class ArchMismatch(ValueError):
    pass


def _check_arch(stored: dict, expected: ExtractorArch | None, path) -> ExtractorArch:
    arch = ExtractorArch.from_dict(stored)
    if expected is not None and arch != expected:
        raise ArchMismatch(f"checkpoint {path} was written for arch {arch.to_dict()} "
                           f"but the run expects {expected.to_dict()}")
    return arch


def save_extractor(path, extractor: FeatureExtractor, extra: dict | None = None, opt=None, rng=None) -> None:
    opt_meta, opt_table = ckpt.optimizer_tables(opt)
    meta = {"kind": "extractor", "arch": extractor.arch.to_dict(), "frozen": extractor.frozen}
    meta.update(extra or {})
    ckpt.save(path, ckpt.Checkpoint(meta, OrderedDict(extractor.state_dict()), opt_meta, opt_table,
                                    rng_state(rng) if rng is not None else None))


def load_extractor(path, expected_arch: ExtractorArch | None = None) -> FeatureExtractor:
    c = ckpt.load(path)
    if c.meta.get("kind") != "extractor":
        raise ckpt.CheckpointError(f"{path} holds a {c.meta.get('kind')!r} checkpoint, not an extractor")
    arch = _check_arch(c.meta["arch"], expected_arch, path)
    ext = FeatureExtractor(arch)
    ext.load_state_dict(c.params)
    if c.meta.get("frozen", True):
        ext.freeze()
    return ext


def save_adaptation(path, nets: AdaptationNetworks, state: dict | None = None, extra: dict | None = None,
                    opt=None, rng=None) -> None:
    """Write ``nets`` (or an explicit ``state`` dict for it, e.g. the best-validation snapshot)."""
    opt_meta, opt_table = ckpt.optimizer_tables(opt)
    meta = {"kind": "adaptation", "arch": nets.arch.to_dict(), "adaptation": nets.cfg.to_dict()}
    meta.update(extra or {})
    params = OrderedDict(state if state is not None else nets.state_dict())
    ckpt.save(path, ckpt.Checkpoint(meta, params, opt_meta, opt_table,
                                    rng_state(rng) if rng is not None else None))


def load_adaptation(path, expected_arch: ExtractorArch | None = None) -> AdaptationNetworks:
    c = ckpt.load(path)
    if c.meta.get("kind") != "adaptation":
        raise ckpt.CheckpointError(f"{path} holds a {c.meta.get('kind')!r} checkpoint, not adaptation networks")
    arch = _check_arch(c.meta["arch"], expected_arch, path)
    nets = AdaptationNetworks(arch, AdaptationConfig.from_dict(c.meta["adaptation"]))
    nets.load_state_dict(c.params)
    return nets
