"""Training loop: plain SGD (optional momentum), deterministic given a seed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError
from .layers import Model, Parameter
from .ops import softmax_cross_entropy


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    steps_per_epoch: int | None = None  # None = one pass over the training set
    batch_size: int = 25
    dropout_rate: float = 0.5
    rng_seed: int = 0
    momentum: float = 0.0
    augment_multiplier: int = 1  # >1 only when augmentation feeds the loop

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            raise ConfigError("steps_per_epoch must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    val_acc: float
    train_loss: float
    val_loss: float


def sgd_step(params: list[Parameter], lr: float, momentum: float = 0.0, state: dict | None = None):
    """value <- value - lr * grad for every trainable parameter; grads zeroed after."""
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericsError(f"non-finite gradient in parameter {p.name}")
        if p.trainable:
            step = p.grad
            if momentum and state is not None:
                buf = state.get(p.name)
                buf = momentum * buf + p.grad if buf is not None else p.grad.copy()
                state[p.name] = buf
                step = buf
            p.value = p.value - lr * step
        p.grad = np.zeros_like(p.grad)


def evaluate(model: Model, images, labels):
    """Returns (accuracy, mean cross-entropy loss) in inference mode."""
    logits = model.predict_logits(images)
    loss, _ = softmax_cross_entropy(logits, labels)
    acc = float((np.argmax(logits, axis=-1) == labels).mean())
    return acc, loss


def train_model(model: Model, train_images, train_labels, config: TrainConfig,
                val_images=None, val_labels=None) -> list[EpochRecord]:
    """SGD training, bitwise deterministic given (rng_seed, data, config)."""
    n = len(train_images)
    if n == 0:
        return []
    steps = config.steps_per_epoch or max(1, int(np.ceil(n / config.batch_size)))
    if config.steps_per_epoch is not None and steps * config.batch_size > n * max(1, config.augment_multiplier):
        raise ConfigError(
            f"steps_per_epoch*batch_size = {steps * config.batch_size} exceeds "
            f"{n} samples x augment multiplier {config.augment_multiplier}"
        )
    model.set_dropout_rate(config.dropout_rate)
    rng = np.random.default_rng(config.rng_seed)
    state: dict = {}
    params = model.params()
    history = []
    order = np.array([], dtype=np.intp)
    for epoch in range(1, config.epochs + 1):
        correct = 0
        seen = 0
        loss_sum = 0.0
        for _ in range(steps):
            while len(order) < config.batch_size:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[: config.batch_size], order[config.batch_size :]
            xb, yb = train_images[idx], train_labels[idx]
            logits = model.forward(xb, train=True, rng=rng)
            loss, dlogits = softmax_cross_entropy(logits, yb)
            model.backward(dlogits)
            sgd_step(params, config.learning_rate, config.momentum, state)
            correct += int((np.argmax(logits, axis=-1) == yb).sum())
            seen += len(yb)
            loss_sum += loss
        if val_images is not None and len(val_images):
            val_acc, val_loss = evaluate(model, val_images, val_labels)
        else:
            val_acc, val_loss = float("nan"), float("nan")
        history.append(EpochRecord(epoch, correct / seen, val_acc, loss_sum / steps, val_loss))
    return history
