"""Offline CRR for sequential recommendation with a causal-attention policy."""

from .crr import CrrConfig, CrrTrainer, FilterSpec, filter_weight, train_crr
from .data import Dataset, InteractionRecord, RewardSpec, SplitSpec, TransitionSet, ingest, parse_log
from .errors import ConfigError, CrrecError, DataError, NumericError
from .estimators import CRRRecommender, InteractionEncoder, NextItemRecommender
from .metrics import MetricReport, evaluate_policy
from .networks import PolicyNetwork, ValueNetwork, load_network, save_network
from .pretrain import PretrainConfig, pretrain

__version__ = "0.1.0"

__all__ = [
    "CRRRecommender", "ConfigError", "CrrConfig", "CrrTrainer", "CrrecError", "DataError",
    "Dataset", "FilterSpec", "InteractionEncoder", "InteractionRecord", "MetricReport",
    "NextItemRecommender", "NumericError", "PolicyNetwork", "PretrainConfig", "RewardSpec",
    "SplitSpec", "TransitionSet", "ValueNetwork", "evaluate_policy", "filter_weight", "ingest",
    "load_network", "parse_log", "pretrain", "save_network", "train_crr",
]
