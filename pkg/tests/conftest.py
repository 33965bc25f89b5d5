"""Shared fixtures and the finite-difference gradient oracle."""

import numpy as np
import pytest

from advdissect.tensornet import (
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool2d,
    Model,
    ReLU,
)


def finite_diff(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. x, mutated in place."""
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        fp = f()
        flat_x[i] = orig - step
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference over the larger of the two gradient scales."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def away_from_relu_kink(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values away from 0 so FD steps cannot cross the ReLU kink."""
    return x + margin * np.sign(x) + margin * (x == 0)


def pool_windows_have_margin(x: np.ndarray, size: int, stride: int, margin: float) -> bool:
    """True when every pooling window's top-2 gap exceeds margin (FD-safe)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (-1,))
    part = np.sort(flat, axis=-1)
    return bool((part[..., -1] - part[..., -2] > margin).all())


def tiny_cnn(num_classes: int = 3, in_channels: int = 3, size: int = 8, seed: int = 1) -> Model:
    layers = [
        Conv2d("conv1", 4, 3, 1, 1), ReLU("relu1"), MaxPool2d("pool1", 2),
        Conv2d("conv2", 8, 3, 1, 1), ReLU("relu2"),
        GlobalAvgPool("gap"), Dense("fc", num_classes),
    ]
    return Model(layers, (in_channels, size, size), seed=seed)


@pytest.fixture
def tiny_model():
    return tiny_cnn()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
