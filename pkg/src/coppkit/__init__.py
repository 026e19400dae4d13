"""Conformal prediction sets for contextual-bandit outcomes under a shifted target policy."""

from .core import (BanditDataset, ClassifierEpsilon, Deterministic, GaussianLinear, Kind, LoggedSample,
                   PolicySpec, PredictionSet, SplitSpec, TabularRule, policy_prob, policy_sample,
                   split_dataset)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BanditDataset", "ClassifierEpsilon", "Deterministic", "GaussianLinear", "Kind",
    "LoggedSample", "PolicySpec", "PredictionSet", "SplitSpec", "TabularRule", "policy_prob",
    "policy_sample", "split_dataset", "__version__",
]
