"""Few-shot classifiers whose feature extractor and head are adapted per task by amortized networks."""

from .adaptation import AdaptationConfig, AdaptationNetworks, TaskParams
from .engine import TaskAdaptiveClassifier, episode_loss, meta_train, predict, pretrain_theta
from .episodes import Episode, TaskGenConfig, sample_episode
from .evaluation import EvalReport, evaluate, gradient_baseline_adapt
from .extractor import ExtractorArch, FeatureExtractor, FiLMParams, film_param_count

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "AdaptationNetworks", "TaskParams", "TaskAdaptiveClassifier", "episode_loss",
    "meta_train", "predict", "pretrain_theta", "Episode", "TaskGenConfig", "sample_episode", "EvalReport",
    "evaluate", "gradient_baseline_adapt", "ExtractorArch", "FeatureExtractor", "FiLMParams",
    "film_param_count",
]
