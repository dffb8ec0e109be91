"""CNN-transformer hybrid segmentation network with convolutional-linear
attention skip gates, built on a self-contained numpy autodiff core."""

from . import autodiff, data, layers, metrics, model, nn, training
from .autodiff import Parameter, Tape, Tensor, backward, grad_check
from .model import ModelConfig, TFCNsModel, build, class_activation_map, load_checkpoint, predict, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "autodiff", "data", "layers", "metrics", "model", "nn", "training",
    "Parameter", "Tape", "Tensor", "backward", "grad_check",
    "ModelConfig", "TFCNsModel", "build", "class_activation_map",
    "load_checkpoint", "predict", "save_checkpoint",
    "TrainConfig", "train",
]
