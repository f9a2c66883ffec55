"""Dynamic weighted federated learning for aligned sequence classification."""

from .checkpoint import load_model, save_weights
from .config import ExperimentConfig, load_config, parse_config
from .encoding import Alphabet, EncodedDataset, SequenceRecord, one_hot_encode, parse_fasta_corpus
from .experiment import export_activations, run_experiment
from .federation import (
    AggregationStrategy,
    ClientReport,
    DynamicWeights,
    RoundConfig,
    aggregate,
    compute_dynamic_weights,
    run_client,
    run_federation,
)
from .metrics import MetricsReport, classification_metrics, confusion_matrix, evaluate_runs, roc_auc_macro_ovr
from .nn import Model, ModelWeights, TrainConfig, build_model, train
from .partitioning import FederatedSplit, SplitPlan, make_federated_split
from .synthetic import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "load_model",
    "save_weights",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "Alphabet",
    "EncodedDataset",
    "SequenceRecord",
    "one_hot_encode",
    "parse_fasta_corpus",
    "export_activations",
    "run_experiment",
    "AggregationStrategy",
    "ClientReport",
    "DynamicWeights",
    "RoundConfig",
    "aggregate",
    "compute_dynamic_weights",
    "run_client",
    "run_federation",
    "MetricsReport",
    "classification_metrics",
    "confusion_matrix",
    "evaluate_runs",
    "roc_auc_macro_ovr",
    "Model",
    "ModelWeights",
    "TrainConfig",
    "build_model",
    "train",
    "FederatedSplit",
    "SplitPlan",
    "make_federated_split",
    "SyntheticSpec",
    "generate_synthetic",
]
