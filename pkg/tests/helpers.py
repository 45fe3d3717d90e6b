"""Small models and comparison helpers shared across test modules."""

import numpy as np

from taskadapt.adaptation import AdaptationConfig, AdaptationNetworks
from taskadapt.data import FamilySpec
from taskadapt.engine import TaskAdaptiveClassifier
from taskadapt.extractor import ExtractorArch, FeatureExtractor
from taskadapt.tensor.random import make_rng

ACCEPTANCE_LINES = []   # PASS/FAIL lines, echoed in the terminal summary

TINY_ARCH = ExtractorArch(image_size=8, pre_channels=4, stages=((4, ("basic",)), (6, ("scaling",))))
TINY_ADAPT = AdaptationConfig(d_global=8, encoder_channels=(4, 8))
SMALL_FAMILIES = (
    FamilySpec("colors", classes={"train": 12, "val": 6, "test": 6}, background=0.15,
               spacing={"train": 0.2, "val": 0.3, "test": 0.3}),
    FamilySpec("patterns", classes={"train": 12, "val": 6, "test": 6}, background=0.85,
               spacing={"train": 0.2, "val": 0.3, "test": 0.3}),
)


def jitter_state(module, rng, scale=0.1):
    """Nudge every bias/shift off zero so ReLUs do not sit on their kink."""
    for name, p in module.named_parameters():
        if name.endswith((".bias", ".shift")):
            p.data = p.data + rng.standard_normal(p.shape) * scale


def tiny_model(mode="ar", seed=0, r_scale=None):
    """Random-init extractor and adaptation networks on the tiny architecture."""
    extractor = FeatureExtractor(TINY_ARCH, seed=seed).freeze()
    rng = make_rng(seed, "tiny-model")
    jitter_state(extractor, rng)
    nets = AdaptationNetworks(TINY_ARCH, AdaptationConfig(**{**TINY_ADAPT.to_dict(), "mode": mode}), seed=seed)
    jitter_state(nets, rng)
    if r_scale is not None:
        for name, p in nets.named_parameters():
            if name.endswith((".r_gamma", ".r_beta")):
                p.data = rng.standard_normal(p.shape) * r_scale
    return TaskAdaptiveClassifier(extractor, nets, mode)


def random_images(rng, n, size=8):
    return rng.uniform(0.0, 1.0, (n, 3, size, size))


def assert_close(a, b, tol):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    assert np.max(np.abs(a - b), initial=0.0) <= tol, np.max(np.abs(a - b))


def tiny_config_tree(seed=0, mode="no_ar"):
    """A complete run configuration small enough to drive every CLI command in seconds."""
    from taskadapt import config

    tree = config.default_tree(seed)
    tree["arch"] = config.to_tree(TINY_ARCH)
    tree["adaptation"] = config.to_tree(AdaptationConfig(**{**TINY_ADAPT.to_dict(), "mode": mode}))
    tasks = config.to_tree(config.TaskGenConfig(families=SMALL_FAMILIES, way_max=3, shot_max=2,
                                                target_per_class=2))
    tree["tasks"] = tasks
    tree["pretrain_data"].update(n_colors=3, n_textures=2, per_class=4)
    tree["pretrain"].update(epochs=2, batch_size=8)
    tree["metatrain"].update(steps=2, episodes_per_batch=2, validate_every=1, val_episodes=1, mode=mode)
    tree["eval"]["episodes"] = 2
    tree["continual"].update(splits=[[0, 1], [2, 3]], shots=2, targets=2, runs=2)
    tree["active"].update(seeds=2, iterations=2)
    tree["active"]["task"].update(way=2, pool_common=2, pool_rare=1, targets_per_mode=2)
    return tree


def write_config(path, tree):
    import yaml

    path.write_text(yaml.safe_dump(tree, sort_keys=False), encoding="utf-8")
    return path


PIPELINE = (["gen-data", "--per-class", "3"], ["pretrain"], ["metatrain"], ["eval"], ["continual"], ["active"])


def run_pipeline(cfg_path, out):
    """Drive every command into ``out``; returns ``{file name: bytes}`` of everything written."""
    from taskadapt.cli import main

    for cmd in PIPELINE:
        code = main(cmd + ["--config", str(cfg_path), "--out", str(out)])
        assert code == 0, cmd
    records = sorted(str(p) for p in out.glob("*.json") if not p.name.startswith("manifest"))
    assert main(["plot", *records, "--out", str(out)]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}
