"""
Convolution-kernel normalization layers for convolutional networks
"""

__version__ = "0.1.0.dev0"

from .model import ClassifierConfig, Model, NormKind, build_allcnn
from .normalization import plan_dwck
from .tensor import Tensor
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_model

__all__ = (
    "ClassifierConfig",
    "Model",
    "NormKind",
    "Tensor",
    "TrainConfig",
    "build_allcnn",
    "load_checkpoint",
    "plan_dwck",
    "save_checkpoint",
    "train_model",
)
