"""Confidence-aware anomaly detection with a deviation-loss score head and a confidence head."""

__version__ = "0.1.0"

from .confidence import DecisionThresholds, boundary_score, prediction_probability
from .data import Dataset, ImageSynthConfig, SynthConfig, load_manifest, save_manifest, synth_images, synth_tabular
from .estimator import BinaryBaselineClassifier, CAADetector
from .evaluation import confidence_sweep, confusion_metrics, imbalance_experiment, roc_auc, shift_experiment
from .exceptions import CAADError, CheckpointError, ConfigError, DataError, DivergenceError
from .pipeline import Decision, Diagnosis, TrainConfig, diagnose

__all__ = [
    "BinaryBaselineClassifier", "CAADError", "CAADetector", "CheckpointError", "ConfigError", "DataError",
    "Dataset", "Decision", "DecisionThresholds", "Diagnosis", "DivergenceError", "ImageSynthConfig",
    "SynthConfig", "TrainConfig", "boundary_score", "confidence_sweep", "confusion_metrics", "diagnose",
    "imbalance_experiment", "load_manifest", "prediction_probability", "roc_auc", "save_manifest",
    "shift_experiment", "synth_images", "synth_tabular",
]
