"""Two-stage training: pretrain the extractor, freeze it, meta-train the adaptation networks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .adaptation import MODES, AdaptationConfig, AdaptationNetworks, TaskParams
from .data import LabeledImages
from .episodes import Episode, TaskGenConfig, fixed_episodes, sample_episode
from .extractor import ExtractorArch, FeatureExtractor
from .tensor import Linear, Tensor, adam, apply_stats, backward, ops, sgd, step
from .tensor.random import make_rng

log = logging.getLogger(__name__)


class TaskAdaptiveClassifier:
    """A frozen extractor plus the adaptation networks that condition it on a task."""

    def __init__(self, extractor: FeatureExtractor, nets: AdaptationNetworks, mode: str | None = None):
        if extractor.arch != nets.arch:
            raise ValueError(f"extractor arch {extractor.arch.to_dict()} does not match adaptation arch "
                             f"{nets.arch.to_dict()}")
        self.extractor = extractor
        self.nets = nets
        self.mode = mode or nets.cfg.mode
        if self.mode not in MODES:
            raise ValueError(f"unknown adaptation mode {self.mode!r}")

    def adapt(self, context_x, context_y) -> TaskParams:
        return self.nets.adapt(_as_images(context_x), context_y, self.extractor, self.mode)

    def predict(self, x, task: TaskParams) -> np.ndarray:
        return predict(x, self.extractor, task)

    def predict_episode(self, ep: Episode) -> np.ndarray:
        return self.predict(ep.target_x, self.adapt(ep.context_x, ep.context_y))


def _as_images(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def task_logits(x, extractor: FeatureExtractor, task: TaskParams) -> Tensor:
    """``f(x; psi_f) W^T + b`` for a batch of images."""
    feats = extractor.extract(_as_images(x), task.psi_f)
    return ops.add(ops.matmul(feats, ops.transpose(task.weights)), task.biases)


def predict(x, extractor: FeatureExtractor, task: TaskParams) -> np.ndarray:
    """Class probabilities, shape (M, C)."""
    return ops.softmax_array(task_logits(x, extractor, task).data)


# -- episode objective -------------------------------------------------------

def episode_objective(ep: Episode, extractor: FeatureExtractor, nets: AdaptationNetworks,
                      mode: str | None = None, train: bool = False, stats: list | None = None) -> Tensor:
    """Mean target negative log-likelihood plus the FiLM gate penalty."""
    if not extractor.frozen:
        raise RuntimeError("the extractor must be pretrained and frozen before episodic training")
    task = nets.adapt(_as_images(ep.context_x), ep.context_y, extractor, mode, train=train, stats=stats)
    nll = ops.cross_entropy(task_logits(ep.target_x, extractor, task), ep.target_y)
    return ops.add(nll, nets.penalty())


def episode_loss(ep: Episode, extractor: FeatureExtractor, nets: AdaptationNetworks, mode: str | None = None,
                 train: bool = False, stats: list | None = None) -> tuple[float, dict]:
    """``(loss, {parameter name: gradient})`` over the adaptation parameters only."""
    loss = episode_objective(ep, extractor, nets, mode, train, stats)
    named = list(nets.named_parameters())
    grads = backward(loss, [p for _, p in named])
    return loss.item(), {name: g for (name, _), g in zip(named, grads)}


# -- pretraining -------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_every: int = 5        # epochs between lr / 10 steps
    augment_shift: int = 1
    augment_jitter: float = 0.05
    augment_flip: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown pretrain keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: PretrainConfig, epoch: int) -> float:
    return cfg.learning_rate / 10 ** (epoch // cfg.decay_every)


def augment(rng: np.random.Generator, images: np.ndarray, cfg: PretrainConfig) -> np.ndarray:
    out = images.copy()
    if cfg.augment_shift:
        for i in range(out.shape[0]):
            dy, dx = rng.integers(-cfg.augment_shift, cfg.augment_shift + 1, size=2)
            out[i] = np.roll(out[i], (int(dy), int(dx)), axis=(1, 2))
    if cfg.augment_jitter:
        out = out + rng.normal(0.0, cfg.augment_jitter, size=(out.shape[0], out.shape[1], 1, 1))
    if cfg.augment_flip:
        flip = rng.random(out.shape[0]) < 0.5
        out[flip] = out[flip, :, :, ::-1]
    return out


@dataclass
class PretrainResult:
    extractor: FeatureExtractor
    history: list = field(default_factory=list)
    opt: object = None

    @property
    def final_accuracy(self) -> float:
        return self.history[-1]["accuracy"] if self.history else float("nan")


def pretrain_theta(data: LabeledImages, arch: ExtractorArch, cfg: PretrainConfig = PretrainConfig(),
                   seed: int = 0, callback=None) -> PretrainResult:
    """Full-way classification with a temporary linear head; returns the frozen extractor.

    ``history`` has one record per epoch with the running training loss and
    accuracy (measured on the augmented batches, batch norm in train mode).
    """
    if data.images.shape[1:] != (arch.in_channels, arch.image_size, arch.image_size):
        raise ValueError(f"dataset images {data.images.shape[1:]} do not match arch input "
                         f"({arch.in_channels}, {arch.image_size}, {arch.image_size})")
    extractor = FeatureExtractor(arch, seed)
    head = Linear(make_rng(seed, "pretrain-head"), arch.feature_dim, data.num_classes)
    rng = make_rng(seed, "pretrain")
    named = [("theta." + n, p) for n, p in extractor.named_parameters()] + \
            [("head." + n, p) for n, p in head.named_parameters()]
    params = dict(named)
    opt = sgd(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        opt.learning_rate = lr_at(cfg, epoch)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            x = Tensor(augment(rng, data.images[idx], cfg))
            stats = []
            logits = head(extractor.extract(x, train=True, stats=stats))
            loss = ops.cross_entropy(logits, data.labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"pretraining diverged at epoch {epoch}, batch {b // cfg.batch_size} "
                                         f"(loss {value}, lr {opt.learning_rate})")
            grads = backward(loss, [p for _, p in named])
            step(params, {name: g for (name, _), g in zip(named, grads)}, opt)
            apply_stats(stats)
            total += value * idx.size
            correct += int(np.sum(logits.data.argmax(axis=1) == data.labels[idx]))
        rec = {"epoch": epoch, "lr": opt.learning_rate, "loss": total / n, "accuracy": correct / n}
        history.append(rec)
        log.info("pretrain epoch %d lr %.4g loss %.4f acc %.4f", epoch, rec["lr"], rec["loss"], rec["accuracy"])
        if callback is not None:
            callback(rec)
    extractor.freeze()
    return PretrainResult(extractor, history, opt)


def accuracy_on(extractor: FeatureExtractor, head: Linear, data: LabeledImages, batch: int = 256) -> float:
    correct = 0
    for b in range(0, len(data), batch):
        logits = head(extractor.extract(Tensor(data.images[b:b + batch])))
        correct += int(np.sum(logits.data.argmax(axis=1) == data.labels[b:b + batch]))
    return correct / len(data)


# -- meta-training -----------------------------------------------------------

@dataclass(frozen=True)
class MetaTrainConfig:
    steps: int = 400
    episodes_per_batch: int = 8
    learning_rate: float = 1e-3
    validate_every: int = 50
    val_episodes: int = 20      # per family
    mode: str = "ar"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown adaptation mode {self.mode!r}")
        if self.steps < 0 or self.episodes_per_batch < 1:
            raise ValueError("steps must be >= 0 and episodes_per_batch >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "MetaTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown metatrain keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetaTrainResult:
    final_state: dict
    best_state: dict
    best_step: int
    history: list = field(default_factory=list)
    validations: list = field(default_factory=list)
    opt: object = None


def validation_better(new: dict, old: dict) -> bool:
    """True when more than half of the families have a higher accuracy."""
    wins = sum(new[k] > old[k] for k in old)
    return wins > len(old) / 2


def episode_accuracy(model: TaskAdaptiveClassifier, ep: Episode) -> float:
    probs = model.predict_episode(ep)
    return float(np.mean(probs.argmax(axis=1) == ep.target_y))


def validate(model: TaskAdaptiveClassifier, episodes: dict) -> tuple[dict, float]:
    """Per-family mean accuracy and mean loss over the fixed validation episodes."""
    accs, losses = {}, []
    for fam, eps in episodes.items():
        a = []
        for ep in eps:
            probs = model.predict_episode(ep)
            a.append(np.mean(probs.argmax(axis=1) == ep.target_y))
            losses.append(-np.mean(np.log(probs[np.arange(len(ep.target_y)), ep.target_y] + 1e-300)))
        accs[fam] = float(np.mean(a))
    return accs, float(np.mean(losses))


def meta_train(extractor: FeatureExtractor, nets: AdaptationNetworks, tasks: TaskGenConfig,
               cfg: MetaTrainConfig = MetaTrainConfig(), seed: int = 0, callback=None) -> MetaTrainResult:
    """Adam on the mean episode loss of each batch, with the extractor frozen.

    The global encoder's batch norm uses context-set statistics while
    training and folds them into its running averages; everything else
    stays in eval mode. ``nets`` is left holding the final parameters.
    """
    if not extractor.frozen:
        raise RuntimeError("meta-training needs a pretrained, frozen extractor")
    digest = extractor.digest()
    families = tasks.build()
    rng = make_rng(seed, "meta-train")
    val_eps = fixed_episodes(tasks, make_rng(seed, "meta-val"), cfg.val_episodes, "val", families)
    named = list(nets.named_parameters())
    params = dict(named)
    opt = adam(cfg.learning_rate)
    model = TaskAdaptiveClassifier(extractor, nets, cfg.mode)

    history, validations = [], []
    best_state = nets.state_dict()
    best_step = 0
    best_acc = None
    if cfg.steps and cfg.val_episodes:
        best_acc, val_loss = validate(model, val_eps)
        validations.append({"step": 0, "accuracy": best_acc, "loss": val_loss})

    for it in range(1, cfg.steps + 1):
        total = {name: np.zeros(p.shape) for name, p in named}
        losses = []
        for _ in range(cfg.episodes_per_batch):
            ep = sample_episode(tasks, rng, "train", families)
            stats = []
            value, grads = episode_loss(ep, extractor, nets, cfg.mode, train=True, stats=stats)
            if not np.isfinite(value):
                raise FloatingPointError(f"meta-training loss is {value} at step {it} (family {ep.family}, "
                                         f"way {ep.way})")
            for name, g in grads.items():
                total[name] += g
            apply_stats(stats)
            losses.append(value)
        step(params, {k: v / cfg.episodes_per_batch for k, v in total.items()}, opt)
        rec = {"step": it, "loss": float(np.mean(losses))}
        history.append(rec)
        if callback is not None:
            callback(rec)
        if cfg.val_episodes and cfg.validate_every and (it % cfg.validate_every == 0 or it == cfg.steps):
            acc, val_loss = validate(model, val_eps)
            validations.append({"step": it, "accuracy": acc, "loss": val_loss})
            log.info("meta-train step %d loss %.4f val %s", it, rec["loss"], acc)
            if validation_better(acc, best_acc):
                best_acc, best_state, best_step = acc, nets.state_dict(), it
        if extractor.digest() != digest:
            raise RuntimeError("extractor parameters changed during meta-training")
    return MetaTrainResult(nets.state_dict(), best_state, best_step, history, validations, opt)


def new_model(extractor: FeatureExtractor, cfg: AdaptationConfig = AdaptationConfig(), seed: int = 0,
              mode: str | None = None) -> TaskAdaptiveClassifier:
    nets = AdaptationNetworks(extractor.arch, cfg, seed)
    return TaskAdaptiveClassifier(extractor, nets, mode)
