"""Multimodal binary classification: gene expression + histology patch features."""

from .data_io import DatasetBundle, generate_synthetic, load_bundle, save_bundle
from .fusion import STRATEGIES, FusionModel, ModelConfig, load_model, predict, save_model
from .genomics import GeneMatrix, GenePrepConfig, apply_gene_pipeline, fit_gene_pipeline
from .metrics import MetricSet, aggregate_folds, evaluate_predictions, pr_auc
from .training import (AblationReport, EvalReport, TrainConfig, run_ablation,
                       run_cv_experiment, stratified_kfold, train_model)

__version__ = "0.1.0"

__all__ = [
    "AblationReport",
    "DatasetBundle",
    "EvalReport",
    "FusionModel",
    "GeneMatrix",
    "GenePrepConfig",
    "MetricSet",
    "ModelConfig",
    "STRATEGIES",
    "TrainConfig",
    "aggregate_folds",
    "apply_gene_pipeline",
    "evaluate_predictions",
    "fit_gene_pipeline",
    "generate_synthetic",
    "load_bundle",
    "load_model",
    "pr_auc",
    "predict",
    "run_ablation",
    "run_cv_experiment",
    "save_bundle",
    "save_model",
    "stratified_kfold",
    "train_model",
    "__version__",
]
