"""Pool-based active learning on top of amortized adaptation.

Each iteration re-adapts the model to the labelled set from scratch, scores
the unlabelled pool with an acquisition function of the predictive
distribution and moves the chosen items into the labelled set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .episodes import draw_images
from .tensor.random import make_rng

KINDS = ("variation-ratios", "predictive-entropy", "random")


def _check_distribution(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2):
        raise ValueError(f"expected a probability vector or matrix, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must be non-negative and sum to 1 (within 1e-6)")
    return p


def variation_ratios(p) -> np.ndarray | float:
    """``1 - max_c p_c``; row-wise for a matrix."""
    p = _check_distribution(p)
    out = 1.0 - p.max(axis=-1)
    return float(out) if p.ndim == 1 else out


def predictive_entropy(p) -> np.ndarray | float:
    """``-sum_c p_c ln p_c`` with ``0 ln 0 = 0``; row-wise for a matrix."""
    p = _check_distribution(p)
    logp = np.log(np.where(p > 0, p, 1.0))
    out = -np.sum(p * logp, axis=-1)
    return float(out) if p.ndim == 1 else out


def score(probs: np.ndarray, kind: str) -> np.ndarray:
    if kind == "variation-ratios":
        return variation_ratios(np.atleast_2d(probs))
    if kind == "predictive-entropy":
        return predictive_entropy(np.atleast_2d(probs))
    raise ValueError(f"no score for acquisition kind {kind!r}")


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.size:
        raise ValueError(f"cannot acquire {k} items from a pool of {scores.size}")
    return np.argsort(-scores, kind="stable")[:k]


@dataclass
class PoolState:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    pool_x: np.ndarray
    pool_y: np.ndarray            # hidden from acquisition
    acquired: list = field(default_factory=list)

    def __post_init__(self):
        self.labeled_y = np.asarray(self.labeled_y, dtype=np.int64)
        self.pool_y = np.asarray(self.pool_y, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.pool_y.shape[0]

    def move(self, idx) -> None:
        """Label the pool items at ``idx``; each item can move only once."""
        idx = np.asarray(idx, dtype=np.int64)
        if len(set(idx.tolist())) != idx.size or (idx.size and (idx.min() < 0 or idx.max() >= self.size)):
            raise IndexError(f"invalid pool indices {idx.tolist()} for a pool of {self.size}")
        keep = np.ones(self.size, dtype=bool)
        keep[idx] = False
        self.labeled_x = np.concatenate([self.labeled_x, self.pool_x[idx]])
        self.labeled_y = np.concatenate([self.labeled_y, self.pool_y[idx]])
        self.pool_x, self.pool_y = self.pool_x[keep], self.pool_y[keep]
        self.acquired.append(idx.tolist())


def acquire(pool: PoolState, model, kind: str, k: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pool indices to label next, chosen with the labelled set as context."""
    if kind not in KINDS:
        raise ValueError(f"unknown acquisition kind {kind!r}; expected one of {KINDS}")
    if k > pool.size:
        raise ValueError(f"cannot acquire {k} items from a pool of {pool.size}")
    if kind == "random":
        if rng is None:
            raise ValueError("random acquisition needs an rng")
        return np.sort(rng.choice(pool.size, size=k, replace=False))
    probs = model.predict(pool.pool_x, model.adapt(pool.labeled_x, pool.labeled_y))
    return top_k(score(probs, kind), k)


def accuracy(model, context_x, context_y, target_x, target_y) -> float:
    probs = model.predict(target_x, model.adapt(context_x, context_y))
    return float(np.mean(probs.argmax(axis=1) == np.asarray(target_y)))


def active_loop(model, pool: PoolState, target_x, target_y, kind: str, iterations: int, k: int = 1,
                rng: np.random.Generator | None = None) -> list[float]:
    """Accuracy on the target set before and after each acquisition step.

    ``pool`` is advanced in place. The curve has ``iterations + 1`` entries.
    """
    if len(set(pool.labeled_y.tolist())) != int(pool.labeled_y.max()) + 1:
        raise ValueError("the initial context must include every class")
    curve = [accuracy(model, pool.labeled_x, pool.labeled_y, target_x, target_y)]
    for _ in range(iterations):
        pool.move(acquire(pool, model, kind, k, rng))
        curve.append(accuracy(model, pool.labeled_x, pool.labeled_y, target_x, target_y))
    return curve


# -- synthetic task with an initially unlabelled region ----------------------

@dataclass(frozen=True)
class ActiveTaskConfig:
    way: int = 3
    pool_common: int = 8       # pool items per class from the labelled mode
    pool_rare: int = 3         # pool items per class from the unlabelled mode
    targets_per_mode: int = 6
    split: str = "test"


@dataclass
class ActiveTask:
    pool: PoolState
    target_x: np.ndarray
    target_y: np.ndarray
    rare: np.ndarray            # pool mask of items from the unseen mode


def make_active_task(family, cfg: ActiveTaskConfig, rng: np.random.Generator) -> ActiveTask:
    """Classes that each merge two source classes ("modes" a and b).

    The initial context holds one mode-a example per class. The pool is
    mostly mode-a with a few mode-b items, and the target set is split
    evenly between the modes, so labelling mode-b items matters most.
    """
    n_src = family.num_classes(cfg.split)
    if 2 * cfg.way > n_src:
        raise ValueError(f"need {2 * cfg.way} source classes, family has {n_src}")
    src = rng.choice(n_src, size=2 * cfg.way, replace=False)
    ctx_x, ctx_y, px, py, rare, tx, ty = [], [], [], [], [], [], []
    for c in range(cfg.way):
        a, b = int(src[2 * c]), int(src[2 * c + 1])
        ia = draw_images(family, rng, cfg.split, a, 1 + cfg.pool_common + cfg.targets_per_mode)
        ib = draw_images(family, rng, cfg.split, b, cfg.pool_rare + cfg.targets_per_mode)
        ctx_x.append(ia[:1])
        ctx_y.append(c)
        px += [ia[1:1 + cfg.pool_common], ib[:cfg.pool_rare]]
        py += [c] * (cfg.pool_common + cfg.pool_rare)
        rare += [False] * cfg.pool_common + [True] * cfg.pool_rare
        tx += [ia[1 + cfg.pool_common:], ib[cfg.pool_rare:]]
        ty += [c] * (2 * cfg.targets_per_mode)
    px, py, rare = np.concatenate(px), np.array(py), np.array(rare)
    order = rng.permutation(py.size)
    pool = PoolState(np.concatenate(ctx_x), np.array(ctx_y), px[order], py[order])
    return ActiveTask(pool, np.concatenate(tx), np.array(ty), rare[order])


def iterations_to_reach(curve, target: float) -> int:
    """First iteration whose accuracy is at least ``target`` (len(curve) if never)."""
    for i, a in enumerate(curve):
        if a >= target:
            return i
    return len(curve)


def compare_acquisition(model, family, cfg: ActiveTaskConfig, kinds=KINDS, seeds: int = 20, iterations: int = 10,
                        k: int = 1, seed: int = 0) -> dict:
    """Mean accuracy curves per acquisition kind over seeded tasks.

    Every kind sees the same task for a given seed.
    """
    curves = {kind: [] for kind in kinds}
    for s in range(seeds):
        for kind in kinds:
            task = make_active_task(family, cfg, make_rng(seed, "active-task", s))
            curve = active_loop(model, task.pool, task.target_x, task.target_y, kind, iterations, k,
                                make_rng(seed, "active-random", s))
            curves[kind].append(curve)
    return {kind: np.array(c) for kind, c in curves.items()}
