"""Counterfactual explanation consistency: matching, attribution, fair training and audit."""

from .attribution import cec_score, integrated_gradients, population_cec
from .audit import AuditReport, build_report
from .data import Dataset, FeatureSchema, SyntheticConfig, generate_synthetic, load_csv
from .matcher import build_index, compute_baselines, match, pair
from .model import MLPModel
from .trainer import TrainConfig, Variant, train

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "Dataset",
    "FeatureSchema",
    "MLPModel",
    "SyntheticConfig",
    "TrainConfig",
    "Variant",
    "build_index",
    "build_report",
    "cec_score",
    "compute_baselines",
    "generate_synthetic",
    "integrated_gradients",
    "load_csv",
    "match",
    "pair",
    "population_cec",
    "train",
]
