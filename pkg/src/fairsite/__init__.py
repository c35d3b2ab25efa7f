"""Fair clinical-trial site selection: multimodal site encoders with
missing-modality fusion, a set scorer, and a stochastic top-K policy trained
with policy gradients on an enrollment plus diversity reward."""

from .datagen import ConfigError, GeneratorConfig, generate_dataset
from .metrics import RewardConfig, ndcg, population_entropy, relative_error, reward
from .model import SiteSelectionModel
from .policy import exact_combination_probability, sample_ranking
from .records import DataError, DatasetManifest, RankingInstance, SiteRecord, TrialRecord
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DatasetManifest",
    "GeneratorConfig",
    "RankingInstance",
    "RewardConfig",
    "SiteRecord",
    "SiteSelectionModel",
    "TrainConfig",
    "TrialRecord",
    "evaluate",
    "exact_combination_probability",
    "generate_dataset",
    "ndcg",
    "population_entropy",
    "relative_error",
    "reward",
    "sample_ranking",
    "train",
]
