"""Prior-guided dual-attention anomaly detection for multivariate time series."""

from .autodiff import Tensor, Tape
from .model import ModelConfig, PiModel, estimate_hurst_rs
from .training import TrainConfig, train
from .scoring import ScoringConfig, detect, point_adjust, score_series
from .evaluation import compute_metrics

__all__ = [
    "Tensor", "Tape", "ModelConfig", "PiModel", "estimate_hurst_rs",
    "TrainConfig", "train", "ScoringConfig", "detect", "point_adjust",
    "score_series", "compute_metrics",
]

__version__ = "0.1.0"
