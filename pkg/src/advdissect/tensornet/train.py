"""Single-threaded deterministic training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import TAG_TRAIN_SHUFFLE, substream
from . import tensor as T
from .tensor import NonFiniteError

OPTIMIZERS = ("sgd", "sgd-momentum")


class TrainingDiverged(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # learning_rate 0 is allowed (no-op training), useful as a control
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


def train(model, images: np.ndarray, labels: np.ndarray, config: TrainConfig) -> list:
    """Train in place; returns the per-epoch mean loss history.

    Deterministic for a fixed seed: shuffling comes from a dedicated
    counter-based stream and all reductions are single-threaded numpy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max(initial=0) >= model.num_classes:
        raise ValueError("dataset label exceeds model num_classes")
    n = images.shape[0]
    rng = substream(config.seed, TAG_TRAIN_SHUFFLE)
    velocity = {id(p): np.zeros_like(p.data) for p in model.parameters()}

    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = images[idx], labels[idx]
            model.zero_grads()
            try:
                loss = T.cross_entropy_with_logits(model.forward(xb), yb, reduction="mean")
            except NonFiniteError as e:
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, batch {start // config.batch_size}"
                ) from e
            loss.backward()
            for p in model.parameters():
                g = p.grad if p.grad is not None else 0.0
                if config.optimizer == "sgd-momentum":
                    v = velocity[id(p)]
                    v *= config.momentum
                    v -= config.learning_rate * g
                    p.data += v
                else:
                    p.data -= config.learning_rate * g
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
    return history


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """Fraction of correct argmax predictions."""
    labels = np.asarray(labels, dtype=np.int64)
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        hits += int((model.predict(xb) == labels[start:start + batch_size]).sum())
    return hits / images.shape[0]
