"""Noise-robust cross-modal retrieval training with consistency-guided
sample refinement."""

from .data import PairDataset, generate_synthetic, inject_noise
from .encoders import ModelParams
from .evaluation import RetrievalReport, evaluate
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = ["PairDataset", "generate_synthetic", "inject_noise", "ModelParams",
           "RetrievalReport", "evaluate", "TrainConfig", "TrainResult",
           "train", "__version__"]
