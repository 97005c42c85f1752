"""Siamese change detection for bitemporal remote sensing images."""
from .data import AugmentationConfig, ChannelStats, DatasetManifest, ImagePair, PairDataset, gen_synthetic
from .estimator import ChangeDetector
from .exceptions import CheckpointError, ConfigurationError, FCCDNError, ShapeError, TrainingDiverged
from .inference import Prediction, predict, predict_tiled, render_error_mask
from .metrics import ConfusionCounts, MetricsReport, compute_metrics, confusion
from .network import ChangeDetectionNet, ModelOutputs, NetworkConfig, build_model
from .training import PlateauSchedule, Trainer, TrainConfig, TrainState

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "ChannelStats", "DatasetManifest", "ImagePair", "PairDataset", "gen_synthetic",
    "ChangeDetector", "CheckpointError", "ConfigurationError", "FCCDNError", "ShapeError", "TrainingDiverged",
    "Prediction", "predict", "predict_tiled", "render_error_mask", "ConfusionCounts", "MetricsReport",
    "compute_metrics", "confusion", "ChangeDetectionNet", "ModelOutputs", "NetworkConfig", "build_model",
    "PlateauSchedule", "Trainer", "TrainConfig", "TrainState",
]
