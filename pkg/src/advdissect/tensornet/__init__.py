"""Minimal dense tensor engine: float64 arrays, reverse-mode autodiff, CNN layers."""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    TensorError,
    add,
    conv2d,
    cross_entropy_with_logits,
    dense,
    flatten2d,
    global_avg_pool,
    l2_norm_sum,
    maxpool2d,
    mul,
    relu,
    scale,
    shift,
    softmax,
    sub,
    sum_all,
    tanh_t,
    target_margin,
)
from .layers import (
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    ReLU,
    conv_out_size,
    layer_from_dict,
    layer_to_dict,
    output_shape,
)
from .model import Model, ModelConfigError, ModelFormatError, UnknownLayerError
from .train import TrainConfig, TrainingDiverged, accuracy, train

__all__ = [
    "Tensor", "TensorError", "ShapeError", "NonFiniteError",
    "add", "sub", "mul", "scale", "shift", "tanh_t", "sum_all", "softmax",
    "conv2d", "relu", "maxpool2d", "global_avg_pool", "flatten2d", "dense",
    "cross_entropy_with_logits", "target_margin", "l2_norm_sum",
    "Conv2d", "ReLU", "MaxPool2d", "GlobalAvgPool", "Flatten", "Dense",
    "conv_out_size", "output_shape", "layer_to_dict", "layer_from_dict",
    "Model", "ModelConfigError", "ModelFormatError", "UnknownLayerError",
    "TrainConfig", "TrainingDiverged", "train", "accuracy",
]
