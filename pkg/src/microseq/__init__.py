"""Weakly supervised classification of variable-length feature sequences."""

from .data_io import SynthConfig, generate_synthetic_dataset, load_manifest, split_dataset
from .estimator import SequenceAttentionClassifier
from .exceptions import MicroseqError
from .inference import evaluate, predict_cases
from .preprocessing import DuplicateFrameRemover, StationaryHaarSplitter
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint
from .warping import SoftDtwConfig, hard_dtw, softdtw_gradient, softdtw_value

__version__ = "0.1.0"

__all__ = [
    "DuplicateFrameRemover",
    "MicroseqError",
    "SequenceAttentionClassifier",
    "SoftDtwConfig",
    "StationaryHaarSplitter",
    "SynthConfig",
    "TrainConfig",
    "evaluate",
    "fit",
    "generate_synthetic_dataset",
    "hard_dtw",
    "load_checkpoint",
    "load_manifest",
    "predict_cases",
    "save_checkpoint",
    "softdtw_gradient",
    "softdtw_value",
    "split_dataset",
]
