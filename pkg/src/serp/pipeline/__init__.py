"""Data ingestion, training loops, checkpoints and run configuration."""

from .checkpoint import Checkpoint, CheckpointError, FingerprintError, fingerprint
from .config import MODEL_KINDS, FinetuneConfig, TrainConfig, model_fingerprint
from .data import SHAPES, ConfigError, Dataset, fit_point_count, load_dataset, sample_shape, synth_dataset
from .io import FormatError, InvalidDataError, load_cloud, read_manifest, write_cloud, write_manifest
from .training import (
    Classifier,
    FinetuneResult,
    NumericalError,
    PretrainResult,
    evaluate_pretrain,
    finetune,
    load_pretrained,
    pretrain,
    reconstruct_and_export,
    reconstruct_cloud,
)

__all__ = [
    "MODEL_KINDS",
    "SHAPES",
    "Checkpoint",
    "CheckpointError",
    "Classifier",
    "ConfigError",
    "Dataset",
    "FingerprintError",
    "FinetuneConfig",
    "FinetuneResult",
    "FormatError",
    "InvalidDataError",
    "NumericalError",
    "PretrainResult",
    "TrainConfig",
    "evaluate_pretrain",
    "fingerprint",
    "finetune",
    "fit_point_count",
    "load_cloud",
    "load_dataset",
    "load_pretrained",
    "model_fingerprint",
    "pretrain",
    "read_manifest",
    "reconstruct_and_export",
    "reconstruct_cloud",
    "sample_shape",
    "synth_dataset",
    "write_cloud",
    "write_manifest",
]
