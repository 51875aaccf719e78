"""Skill-diverse expert ensembles for long-tailed classification, with
test-time self-supervised aggregation for unknown test class distributions.

The estimator API (`DiverseExpertClassifier`, `StabilityAggregator`) follows
scikit-learn conventions; the functional modules underneath expose the full
pipeline (data synthesis, losses, training, adaptation, evaluation) and the
`tailexperts` CLI drives end-to-end experiments.
"""

from .aggregate import AdaptConfig, AggregationState, StabilityReport, adapt
from .data import (
    ClassGroups,
    ClassPrior,
    Dataset,
    LongTailProfile,
    ViewConfig,
    class_groups,
    empirical_prior,
    gen_gaussian_mixture,
    gen_views,
    load_dataset,
    make_profile,
    make_test_split,
    save_dataset,
)
from .estimators import DiverseExpertClassifier, StabilityAggregator
from .evaluation import EvalReport, evaluate, identity_check, mi_and_entropy
from .losses import ExpertAdjustment, bal_loss, ce_loss, expert_adjustments, inv_loss
from .model import ExpertModel, init_model, load_checkpoint, predict_probs, save_checkpoint
from .numkit import Rng, finite_diff_grad, log_softmax, softmax
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "AggregationState",
    "ClassGroups",
    "ClassPrior",
    "Dataset",
    "DiverseExpertClassifier",
    "EvalReport",
    "ExpertAdjustment",
    "ExpertModel",
    "LongTailProfile",
    "Rng",
    "StabilityAggregator",
    "StabilityReport",
    "TrainConfig",
    "ViewConfig",
    "adapt",
    "bal_loss",
    "ce_loss",
    "class_groups",
    "empirical_prior",
    "evaluate",
    "expert_adjustments",
    "finite_diff_grad",
    "gen_gaussian_mixture",
    "gen_views",
    "identity_check",
    "init_model",
    "inv_loss",
    "load_checkpoint",
    "load_dataset",
    "log_softmax",
    "make_profile",
    "make_test_split",
    "mi_and_entropy",
    "predict_probs",
    "save_checkpoint",
    "save_dataset",
    "softmax",
    "train",
]
