"""Shifted-window vision transformer with inverted residual blocks, built on
a self-contained reverse-mode autodiff engine, for multi-class skin-image
classification."""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, forward, init_model
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ModelConfig",
    "init_model",
    "forward",
    "TrainConfig",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
