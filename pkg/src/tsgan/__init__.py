"""Conditional video generation with temporal shift blocks, plus metrics and a synthetic dataset."""
from .config import MODES, ModelConfig, TrainConfig
from .estimator import TSGAN, BlockMatchingFlow
from .evaluation import VideoClassifier, fid, inception_score, s3
from .temporal_shift import ShiftSpec, TemporalShift, shift_adjoint, shift_forward
from .training import Trainer

__all__ = [
    "MODES", "ModelConfig", "TrainConfig", "TSGAN", "BlockMatchingFlow", "VideoClassifier", "fid",
    "inception_score", "s3", "ShiftSpec", "TemporalShift", "shift_adjoint", "shift_forward", "Trainer",
]
__version__ = "0.1.0"
