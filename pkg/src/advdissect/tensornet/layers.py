"""Layer descriptors, output-shape algebra, and parameter initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class Conv2d:
    name: str
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class MaxPool2d:
    name: str
    size: int = 2
    stride: int | None = None


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str


@dataclass(frozen=True)
class Flatten:
    name: str


@dataclass(frozen=True)
class Dense:
    name: str
    out_features: int


LAYER_TYPES = {
    "conv2d": Conv2d,
    "relu": ReLU,
    "maxpool2d": MaxPool2d,
    "global_avg_pool": GlobalAvgPool,
    "flatten": Flatten,
    "dense": Dense,
}
_TYPE_NAMES = {cls: name for name, cls in LAYER_TYPES.items()}


def conv_out_size(in_size: int, kernel: int, stride: int, padding: int) -> int:
    return (in_size + 2 * padding - kernel) // stride + 1


def output_shape(layer, in_shape: tuple) -> tuple:
    """Shape of a single sample after `layer`, given its input shape.

    Spatial shapes are (C, H, W); flat shapes are (D,).
    Raises ShapeError naming the layer on any incompatibility.
    """
    if isinstance(layer, Conv2d):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {layer.name!r}: conv2d needs (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        oh = conv_out_size(h, layer.kernel_size, layer.stride, layer.padding)
        ow = conv_out_size(w, layer.kernel_size, layer.stride, layer.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {layer.name!r}: kernel {layer.kernel_size} too large for input {in_shape}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, ReLU):
        return in_shape
    if isinstance(layer, MaxPool2d):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {layer.name!r}: maxpool2d needs (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        stride = layer.stride if layer.stride is not None else layer.size
        if h < layer.size or w < layer.size:
            raise ShapeError(f"layer {layer.name!r}: window {layer.size} too large for input {in_shape}")
        return (c, (h - layer.size) // stride + 1, (w - layer.size) // stride + 1)
    if isinstance(layer, GlobalAvgPool):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {layer.name!r}: global_avg_pool needs (C,H,W) input, got {in_shape}")
        return (in_shape[0],)
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    if isinstance(layer, Dense):
        if len(in_shape) != 1:
            raise ShapeError(f"layer {layer.name!r}: dense needs flat input, got {in_shape}")
        return (layer.out_features,)
    raise TypeError(f"unknown layer type {type(layer)!r}")


def init_params(layer, in_shape: tuple, rng: np.random.Generator) -> dict:
    """Kaiming-uniform weights, zero biases, for layers that carry parameters."""
    if isinstance(layer, Conv2d):
        fan_in = in_shape[0] * layer.kernel_size ** 2
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(layer.out_channels, in_shape[0], layer.kernel_size, layer.kernel_size))
        return {"w": Tensor(w, requires_grad=True), "b": Tensor(np.zeros(layer.out_channels), requires_grad=True)}
    if isinstance(layer, Dense):
        fan_in = in_shape[0]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(layer.out_features, fan_in))
        return {"w": Tensor(w, requires_grad=True), "b": Tensor(np.zeros(layer.out_features), requires_grad=True)}
    return {}


def layer_to_dict(layer) -> dict:
    d = {"type": _TYPE_NAMES[type(layer)], "name": layer.name}
    if isinstance(layer, Conv2d):
        d.update(out_channels=layer.out_channels, kernel_size=layer.kernel_size,
                 stride=layer.stride, padding=layer.padding)
    elif isinstance(layer, MaxPool2d):
        d.update(size=layer.size, stride=layer.stride)
    elif isinstance(layer, Dense):
        d.update(out_features=layer.out_features)
    return d


def layer_from_dict(d: dict):
    kind = d.get("type")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    kwargs = {k: v for k, v in d.items() if k != "type"}
    return LAYER_TYPES[kind](**kwargs)
