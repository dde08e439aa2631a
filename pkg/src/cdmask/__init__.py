"""Mask-classification change detection for bi-temporal imagery."""
from .model import CDMaskFormer, ModelConfig
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = ["CDMaskFormer", "ModelConfig", "TrainConfig", "__version__"]
