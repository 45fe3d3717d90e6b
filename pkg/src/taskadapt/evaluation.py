"""Held-out evaluation with confidence intervals, and the gradient-based adaptation baseline."""

from __future__ import annotations

import json
import multiprocessing
import time
from dataclasses import dataclass, field

import numpy as np

from .adaptation import TaskParams, class_representation
from .engine import predict
from .episodes import Episode, TaskGenConfig, fixed_episodes
from .extractor import FeatureExtractor, FiLMParams
from .tensor import Parameter, Tensor, backward, ops
from .tensor.random import make_rng


def ci95(accuracies) -> float:
    """Half-width ``1.96 * std / sqrt(E)`` of the normal-approximation 95% interval."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        raise ValueError("need at least one episode accuracy")
    return float(1.96 * a.std() / np.sqrt(a.size))


@dataclass
class FamilyResult:
    accuracy: float
    ci95: float
    episodes: int

    @classmethod
    def from_accuracies(cls, accs) -> "FamilyResult":
        return cls(float(np.mean(accs)), ci95(accs), len(accs))


@dataclass
class EvalReport:
    results: dict = field(default_factory=dict)   # family -> FamilyResult
    label: str = ""

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.results.values()]))

    def to_dict(self) -> dict:
        return {"label": self.label,
                "families": {k: {"accuracy": r.accuracy, "ci95": r.ci95, "episodes": r.episodes}
                             for k, r in sorted(self.results.items())},
                "mean_accuracy": self.mean_accuracy}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        rows = [f"{'family':<12s} {'accuracy':>9s} {'ci95':>8s} {'episodes':>8s}"]
        for k, r in sorted(self.results.items()):
            rows.append(f"{k:<12s} {100 * r.accuracy:8.2f}% {100 * r.ci95:7.2f}% {r.episodes:8d}")
        rows.append(f"{'mean':<12s} {100 * self.mean_accuracy:8.2f}%")
        return "\n".join(rows)


def _accuracy(predict_episode, ep: Episode) -> float:
    return float(np.mean(predict_episode(ep).argmax(axis=1) == ep.target_y))


_WORKER_FN = None


def _worker_accuracy(ep: Episode) -> float:
    return _accuracy(_WORKER_FN, ep)


def episode_accuracies(predict_episode, episodes: list, workers: int = 1) -> list[float]:
    """Per-episode target accuracy; ``workers > 1`` fans episodes out to forked processes.

    Episodes are independent, so the result does not depend on ``workers``.
    """
    global _WORKER_FN
    if workers <= 1 or len(episodes) < 2:
        return [_accuracy(predict_episode, ep) for ep in episodes]
    _WORKER_FN = predict_episode
    try:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            return pool.map(_worker_accuracy, episodes)
    finally:
        _WORKER_FN = None


def evaluate_episodes(predict_episode, episodes_by_family: dict, label: str = "", workers: int = 1) -> EvalReport:
    """``predict_episode(ep) -> (M, C)`` probabilities, scored on fixed episodes."""
    results = {}
    for fam, eps in episodes_by_family.items():
        if not eps:
            raise ValueError(f"family {fam!r} has no evaluation episodes")
        results[fam] = FamilyResult.from_accuracies(episode_accuracies(predict_episode, eps, workers))
    return EvalReport(results, label)


def evaluate(model, tasks: TaskGenConfig, episodes: int, seed: int = 0, split: str = "test",
             label: str = "", workers: int = 1) -> EvalReport:
    """Accuracy of ``model.predict_episode`` on ``episodes`` fresh tasks per family."""
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    eps = fixed_episodes(tasks, make_rng(seed, "evaluate", split), episodes, split)
    return evaluate_episodes(model.predict_episode, eps, label, workers)


# -- gradient baseline -------------------------------------------------------

def prototype_head(feats: np.ndarray, labels, way: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear head equivalent to nearest class mean under squared distance."""
    protos = np.stack([class_representation(Tensor(feats), labels, c).data for c in range(way)])
    return 2.0 * protos, -np.sum(protos * protos, axis=1)


def gradient_baseline_adapt(context_x, context_y, extractor: FeatureExtractor, steps: int = 25,
                            lr: float = 0.001) -> TaskParams:
    """Plain gradient descent on the context loss over FiLM parameters and a linear head.

    FiLM starts at the identity and the head at the prototype solution of
    the unadapted features.
    """
    x = context_x if isinstance(context_x, Tensor) else Tensor(np.asarray(context_x, dtype=np.float64))
    y = np.asarray(context_y, dtype=np.int64)
    way = int(y.max()) + 1
    feats = extractor.extract(x).data
    w0, b0 = prototype_head(feats, y, way)
    film = [(Parameter(np.ones(c)), Parameter(np.zeros(c))) for c in extractor.arch.film_channels()]
    weights, biases = Parameter(w0), Parameter(b0)
    params = [p for pair in film for p in pair] + [weights, biases]
    psi = FiLMParams(film)
    for _ in range(steps):
        logits = ops.add(ops.matmul(extractor.extract(x, psi), ops.transpose(weights)), biases)
        grads = backward(ops.cross_entropy(logits, y), params)
        for p, g in zip(params, grads):
            p.data = p.data - lr * g
    if steps == 0:
        psi = FiLMParams.identity(extractor.arch)
    reps = Tensor(w0 / 2.0)
    return TaskParams(psi_f=psi, weights=weights, biases=biases, class_reps=reps, global_rep=None)


class GradientBaseline:
    """``predict_episode`` wrapper around :func:`gradient_baseline_adapt`."""

    def __init__(self, extractor: FeatureExtractor, steps: int = 25, lr: float = 0.001):
        self.extractor, self.steps, self.lr = extractor, steps, lr

    def adapt(self, context_x, context_y) -> TaskParams:
        return gradient_baseline_adapt(context_x, context_y, self.extractor, self.steps, self.lr)

    def predict_episode(self, ep: Episode) -> np.ndarray:
        return predict(ep.target_x, self.extractor, self.adapt(ep.context_x, ep.context_y))


def timed_accuracy(model, episodes: list) -> tuple[float, float]:
    """``(seconds, mean accuracy)`` for adapt+predict over ``episodes``."""
    t0 = time.perf_counter()
    accs = episode_accuracies(model.predict_episode, episodes)
    return time.perf_counter() - t0, float(np.mean(accs))
