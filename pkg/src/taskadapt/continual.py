"""Continual learning from running-average representations.

No images are kept. For every class the store holds the mean adapted
feature ``z_c`` and the number of examples behind it; a pooled global-encoder
representation is held the same way. Classifier columns are regenerated
from ``z_c`` and FiLM parameters from the stored global representation, so
the model must use the non-auto-regressive pathway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adaptation import TaskParams, generate_classifier
from .engine import TaskAdaptiveClassifier, predict
from .episodes import draw_images
from .extractor import FiLMParams
from .tensor import Tensor, ops
from .tensor.random import make_rng


@dataclass
class RunningMean:
    mean: np.ndarray
    count: int

    def update(self, batch: np.ndarray) -> None:
        n = batch.shape[0]
        if n < 1:
            raise ValueError("a representation update needs at least one example")
        new = batch.mean(axis=0)
        self.mean = (self.count * self.mean + n * new) / (self.count + n)
        self.count += n


@dataclass
class ClassRepStore:
    classes: dict = field(default_factory=dict)     # class id -> RunningMean over adapted features
    global_rep: RunningMean | None = None           # over per-instance global-encoder outputs
    tasks: dict = field(default_factory=dict)       # task id -> class ids

    def __len__(self) -> int:
        return len(self.classes)

    def class_ids(self) -> list:
        return sorted(self.classes)

    def memory_floats(self) -> int:
        n = sum(r.mean.size + 1 for r in self.classes.values())
        return n + (self.global_rep.mean.size + 1 if self.global_rep is not None else 0)

    def to_arrays(self) -> dict:
        """Flat name -> array table, suitable for a checkpoint."""
        out = {}
        for c in self.class_ids():
            out[f"class/{c}/mean"] = self.classes[c].mean
            out[f"class/{c}/count"] = np.array([self.classes[c].count], dtype=np.float64)
        if self.global_rep is not None:
            out["global/mean"] = self.global_rep.mean
            out["global/count"] = np.array([self.global_rep.count], dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, table: dict, tasks: dict | None = None) -> "ClassRepStore":
        store = cls(tasks={int(k): list(v) for k, v in (tasks or {}).items()})
        for name, arr in table.items():
            parts = name.split("/")
            if parts[0] == "class" and parts[2] == "mean":
                c = int(parts[1])
                store.classes[c] = RunningMean(np.array(arr), int(table[f"class/{c}/count"][0]))
        if "global/mean" in table:
            store.global_rep = RunningMean(np.array(table["global/mean"]), int(table["global/count"][0]))
        return store


def _as_batch(features) -> np.ndarray:
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a (N, d) batch, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("a representation update needs at least one example")
    return arr


def update_class_rep(store: ClassRepStore, c: int, features) -> ClassRepStore:
    """``z_c <- (M z_c + N z_new) / (M + N)`` with ``z_new`` the batch mean."""
    batch = _as_batch(features)
    if c in store.classes:
        store.classes[c].update(batch)
    else:
        store.classes[c] = RunningMean(batch.mean(axis=0), batch.shape[0])
    return store


def update_global_rep(store: ClassRepStore, encodings) -> ClassRepStore:
    batch = _as_batch(encodings)
    if store.global_rep is None:
        store.global_rep = RunningMean(batch.mean(axis=0), batch.shape[0])
    else:
        store.global_rep.update(batch)
    return store


def _check_model(model: TaskAdaptiveClassifier) -> None:
    if model.mode == "ar":
        raise ValueError("continual learning needs the no_ar or no_film pathway; "
                         "auto-regressive FiLM depends on raw context activations")


def store_film(model: TaskAdaptiveClassifier, store: ClassRepStore) -> FiLMParams:
    if model.mode == "no_film" or store.global_rep is None:
        return FiLMParams.identity(model.extractor.arch)
    return model.nets.film_from_global(Tensor(store.global_rep.mean), model.extractor)


def observe(store: ClassRepStore, model: TaskAdaptiveClassifier, task_id: int, x, labels) -> ClassRepStore:
    """Fold one batch of labelled data into the store.

    The global representation is updated first; features for the class
    means are then computed under the FiLM parameters it implies.
    """
    _check_model(model)
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if model.mode != "no_film":
        update_global_rep(store, model.nets.global_encoder.encode_instances(x))
    feats = model.extractor.extract(x, store_film(model, store)).data
    for c in np.unique(labels):
        update_class_rep(store, int(c), feats[labels == c])
    known = store.tasks.setdefault(task_id, [])
    for c in np.unique(labels).tolist():
        if c not in known:
            known.append(c)
    return store


def continual_predict(x, model: TaskAdaptiveClassifier, store: ClassRepStore, head_mode: str = "single",
                      task_id: int | None = None) -> tuple[np.ndarray, list]:
    """``(probabilities (M, K), class ids)`` over the candidate classes.

    ``single`` scores every class seen so far; ``multi`` only the classes of
    ``task_id``.
    """
    _check_model(model)
    if not store.classes:
        raise ValueError("the representation store is empty")
    if head_mode == "single":
        ids = store.class_ids()
    elif head_mode == "multi":
        if task_id not in store.tasks:
            raise KeyError(f"unknown task id {task_id!r}; known tasks {sorted(store.tasks)}")
        ids = sorted(store.tasks[task_id])
    else:
        raise ValueError(f"head_mode must be 'single' or 'multi', got {head_mode!r}")
    cols, biases = [], []
    for c in ids:
        w, b = generate_classifier(Tensor(store.classes[c].mean), model.nets.classifier)
        cols.append(w)
        biases.append(b)
    task = TaskParams(psi_f=store_film(model, store), weights=ops.stack(cols), biases=ops.concat(biases),
                      class_reps=Tensor(np.stack([store.classes[c].mean for c in ids])),
                      global_rep=None if store.global_rep is None else Tensor(store.global_rep.mean))
    return predict(x, model.extractor, task), ids


# -- split benchmark ---------------------------------------------------------

class StoreLearner:
    """The representation-store learner driven by the benchmark."""

    def __init__(self, model: TaskAdaptiveClassifier):
        _check_model(model)
        self.model = model
        self.store = ClassRepStore()

    def reset(self) -> None:
        self.store = ClassRepStore()

    def observe(self, task_id: int, x, labels) -> None:
        observe(self.store, self.model, task_id, x, labels)

    def predict(self, x, head_mode: str, task_id: int | None = None):
        return continual_predict(x, self.model, self.store, head_mode, task_id)


def check_splits(splits) -> list:
    splits = [list(map(int, s)) for s in splits]
    seen = set()
    for s in splits:
        if len(s) < 1:
            raise ValueError("every task needs at least one class")
        overlap = seen & set(s)
        if overlap or len(set(s)) != len(s):
            raise ValueError(f"task splits overlap on classes {sorted(overlap or s)}")
        seen |= set(s)
    return splits


@dataclass
class SplitResult:
    multi: np.ndarray          # (T, T): accuracy on task i after observing task t (nan for i > t)
    single: np.ndarray
    upper_bound: float         # per-task adapt on each task alone, multi-head
    runs: int

    @staticmethod
    def accumulate(m: np.ndarray) -> np.ndarray:
        return np.array([np.nanmean(m[:t + 1, t]) for t in range(m.shape[1])])

    @property
    def accumulated_multi(self) -> np.ndarray:
        return self.accumulate(self.multi)

    @property
    def accumulated_single(self) -> np.ndarray:
        return self.accumulate(self.single)

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in a]
        return {"multi": clean(self.multi), "single": clean(self.single),
                "accumulated_multi": self.accumulated_multi.tolist(),
                "accumulated_single": self.accumulated_single.tolist(),
                "upper_bound": self.upper_bound, "runs": self.runs}


def _accuracy(probs: np.ndarray, ids: list, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(ids)[probs.argmax(axis=1)] == labels))


def run_split_benchmark(learner, family, splits, shots: int, runs: int = 30, targets: int = 10,
                        split: str = "test", seed: int = 0, upper_model: TaskAdaptiveClassifier | None = None
                        ) -> SplitResult:
    """Sequential tasks over ``splits`` (lists of class ids of ``family``'s ``split``).

    Each run draws fresh context (``shots`` per class) and target images,
    feeds the tasks in order and scores every task seen so far in both head
    modes after each step. ``upper_model`` (default: the learner's model)
    gives the non-continual reference by adapting to each task alone.
    """
    splits = check_splits(splits)
    t_count = len(splits)
    multi = np.zeros((runs, t_count, t_count))
    single = np.zeros((runs, t_count, t_count))
    upper = []
    upper_model = upper_model or getattr(learner, "model", None)
    for r in range(runs):
        rng = make_rng(seed, "split-benchmark", r)
        learner.reset()
        data = []
        for classes in splits:
            cx, cy, tx, ty = [], [], [], []
            for c in classes:
                imgs = draw_images(family, rng, split, c, shots + targets)
                cx.append(imgs[:shots])
                tx.append(imgs[shots:])
                cy += [c] * shots
                ty += [c] * targets
            data.append((np.concatenate(cx), np.array(cy), np.concatenate(tx), np.array(ty)))
        for t, (cx, cy, _, _) in enumerate(data):
            learner.observe(t, cx, cy)
            for i in range(t_count):
                if i > t:
                    multi[r, i, t] = single[r, i, t] = np.nan
                    continue
                tx, ty = data[i][2], data[i][3]
                multi[r, i, t] = _accuracy(*learner.predict(tx, "multi", i), ty)
                single[r, i, t] = _accuracy(*learner.predict(tx, "single"), ty)
        if upper_model is not None:
            for cx, cy, tx, ty in data:
                if len(np.unique(cy)) < 2:
                    continue
                ids = sorted(np.unique(cy).tolist())
                local = np.searchsorted(ids, cy)
                probs = upper_model.predict(tx, upper_model.adapt(cx, local))
                upper.append(_accuracy(probs, ids, ty))
    return SplitResult(multi.mean(axis=0), single.mean(axis=0),
                       float(np.mean(upper)) if upper else float("nan"), runs)


class RandomLearner:
    """Uniformly random guesses over the candidate classes; a benchmark sanity baseline."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.resets = 0
        self.reset()

    def reset(self) -> None:
        # a fresh stream per run, so repeated runs are independent
        self.tasks: dict = {}
        self.rng = make_rng(self.seed, "random-learner", self.resets)
        self.resets += 1

    def observe(self, task_id: int, x, labels) -> None:
        self.tasks.setdefault(task_id, sorted(set(np.asarray(labels).tolist())))

    def predict(self, x, head_mode: str, task_id: int | None = None):
        if head_mode == "multi":
            ids = self.tasks[task_id]
        else:
            ids = sorted({c for v in self.tasks.values() for c in v})
        n = np.asarray(x).shape[0]
        probs = self.rng.dirichlet(np.ones(len(ids)), size=n)
        return probs, ids
