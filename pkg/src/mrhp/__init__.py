"""Multimodal review helpfulness ranking with cross-modal contrastive training."""
from .config import TrainConfig
from .model import MRHPModel

__all__ = ["TrainConfig", "MRHPModel"]
__version__ = "0.1.0"
