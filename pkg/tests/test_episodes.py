import numpy as np
import pytest
from scipy.stats import chisquare

from helpers import SMALL_FAMILIES
from taskadapt.data import FamilySpec, LabeledImages, combo_dataset, separable_dataset
from taskadapt.episodes import (ArchiveFamily, Episode, TaskGenConfig, episode_stream, fixed_episodes,
                                sample_episode)
from taskadapt.tensor.random import make_rng


def _cfg(**kw):
    return TaskGenConfig(families=SMALL_FAMILIES, **kw)


def test_two_way_one_shot_episode(small_families):
    cfg = _cfg(way_min=2, way_max=2, shot_min=1, shot_max=1)
    ep = sample_episode(cfg, make_rng(0, "ep"), "train", small_families)
    assert ep.way == 2
    assert list(ep.shots) == [1, 1]
    assert ep.context_x.shape == (2, 3, 8, 8)
    assert ep.target_x.shape == (2 * cfg.target_per_class, 3, 8, 8)


def test_same_seed_same_episode(small_families):
    cfg = _cfg()
    a = sample_episode(cfg, make_rng(5, "ep"), "val", small_families)
    b = sample_episode(cfg, make_rng(5, "ep"), "val", small_families)
    assert (a.way, a.family, a.classes) == (b.way, b.family, b.classes)
    for key in ("context_x", "context_y", "target_x", "target_y"):
        assert np.array_equal(getattr(a, key), getattr(b, key))


def test_episode_invariants_hold_over_stream(small_families):
    cfg = _cfg(way_max=6, shot_max=4)
    stream = episode_stream(cfg, make_rng(1, "stream"), "train", small_families)
    for _ in range(50):
        ep = next(stream)
        assert 2 <= ep.way <= 6
        shots = ep.shots
        assert np.all(shots == shots[0]) and 1 <= shots[0] <= 4
        assert set(ep.target_y.tolist()) <= set(range(ep.way))
        assert len(set(ep.classes)) == ep.way
        # context and target never share an image
        flat_c = {x.tobytes() for x in ep.context_x}
        assert not flat_c & {x.tobytes() for x in ep.target_x}


def test_way_distribution_is_uniform(small_families):
    cfg = _cfg(way_min=2, way_max=10, shot_min=1, shot_max=1, target_per_class=1)
    rng = make_rng(0, "chi2")
    ways = [sample_episode(cfg, rng, "train", small_families).way for _ in range(10000)]
    counts = np.bincount(ways, minlength=11)[2:]
    assert counts.sum() == 10000
    assert chisquare(counts).pvalue > 0.01


def test_shot_distribution_covers_range(small_families):
    cfg = _cfg(shot_min=1, shot_max=3, target_per_class=1)
    rng = make_rng(0, "shots")
    shots = {int(sample_episode(cfg, rng, "train", small_families).shots[0]) for _ in range(200)}
    assert shots == {1, 2, 3}


def test_way_larger_than_class_pool_rejected(small_families):
    cfg = _cfg(way_min=7, way_max=7)
    with pytest.raises(ValueError, match="exceeds the 6 test classes"):
        sample_episode(cfg, make_rng(0), "test", small_families)


def test_shots_exceeding_archive_pool_rejected():
    data = LabeledImages(np.zeros((6, 3, 8, 8)), np.repeat([0, 1, 2], 2), 3)
    fam = ArchiveFamily("tiny", data, {"train": [0, 1, 2]})
    cfg = _cfg(shot_min=2, shot_max=2, target_per_class=1)
    with pytest.raises(ValueError, match="are needed"):
        sample_episode(cfg, make_rng(0), "train", [fam])


def test_archive_family_episodes_are_disjoint():
    images = np.arange(40 * 3 * 8 * 8, dtype=np.float64).reshape(40, 3, 8, 8)
    fam = ArchiveFamily("arch", LabeledImages(images, np.repeat(np.arange(4), 10), 4), {"train": [0, 1, 2, 3]})
    cfg = _cfg(way_min=4, way_max=4, shot_min=3, shot_max=3, target_per_class=7)
    ep = sample_episode(cfg, make_rng(3), "train", [fam])
    ids = [float(x.flat[0]) for x in np.concatenate([ep.context_x, ep.target_x])]
    assert len(set(ids)) == 40


@pytest.mark.parametrize("kw, match", [({"way_min": 1}, "way_min"), ({"way_min": 4, "way_max": 3}, "way_min"),
                                      ({"shot_min": 0}, "shot_min"), ({"target_per_class": 0}, "target"),
                                      ({"families": ()}, "family")])
def test_task_config_validation(kw, match):
    with pytest.raises(ValueError, match=match):
        TaskGenConfig(**{"families": SMALL_FAMILIES, **kw})


def test_task_config_round_trip():
    cfg = _cfg(way_max=7)
    assert TaskGenConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError, match="unknown task keys"):
        TaskGenConfig.from_dict({"ways": 3})


def test_episode_type_invariants():
    x = np.zeros((2, 3, 8, 8))
    with pytest.raises(ValueError, match="cover"):
        Episode(x, [0, 2], x, [0, 0], 2)
    with pytest.raises(ValueError, match="subset"):
        Episode(x, [0, 1], x, [0, 2], 2)


def test_fixed_episodes_per_family(small_tasks, small_families):
    eps = fixed_episodes(small_tasks, make_rng(0), 3, "test", small_families)
    assert set(eps) == {"colors", "patterns"}
    assert all(len(v) == 3 and all(e.family == k for e in v) for k, v in eps.items())
    mixed = fixed_episodes(small_tasks, make_rng(0), 10, "test", small_families, per_family=False)
    assert sum(len(v) for v in mixed.values()) == 10


def test_family_splits_hold_distinct_classes():
    fam = TaskGenConfig(families=(FamilySpec("colors"),)).build()[0]
    pools = [fam.pools[s] for s in ("train", "val", "test")]
    assert [len(p) for p in pools] == [400, 10, 10]
    assert not {tuple(c) for c in pools[1]} & {tuple(c) for c in pools[2]}


def test_unknown_family_kind():
    with pytest.raises(ValueError, match="unknown family kind"):
        FamilySpec("digits")


def test_synthetic_datasets_are_seeded():
    a, b = combo_dataset(per_class=2, seed=3), combo_dataset(per_class=2, seed=3)
    assert np.array_equal(a.images, b.images) and a.num_classes == 64
    sep = separable_dataset(16)
    assert sep.num_classes == 2 and len(sep) == 16
