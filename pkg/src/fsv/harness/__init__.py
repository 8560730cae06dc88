"""Configuration, synthetic data and experiment orchestration."""
from .config import ExperimentConfig, config_hash, load_flat, write_manifest
from .data import SyntheticVideoSource
from .experiments import (emit_compression_table, run_ab_loss_experiment, run_id_comparison, train_ae,
                          train_dit)

__all__ = [
    "ExperimentConfig", "config_hash", "load_flat", "write_manifest", "SyntheticVideoSource",
    "emit_compression_table", "run_ab_loss_experiment", "run_id_comparison", "train_ae", "train_dit",
]
