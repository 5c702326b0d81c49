"""SGD-with-momentum pretraining that produces warm-start checkpoints."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .model import shuffled_batches

LR_DECAYS = ("none", "cosine")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 10
    lr_decay: str = "none"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_decay not in LR_DECAYS:
            raise ConfigError(f"lr_decay must be one of {LR_DECAYS}")

    def lr_at(self, epoch):
        if self.lr_decay == "cosine" and self.epochs > 0:
            return 0.5 * self.learning_rate * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


def loss_and_grad(model, params, inputs, labels, weight_decay=0.0):
    """Mean cross-entropy plus ``weight_decay / 2 * |theta|^2`` and its gradient."""
    n = len(labels)
    ll, g = model.grad_log_likelihood(params, inputs, labels)
    with np.errstate(over="ignore", invalid="ignore"):  # train() checks finiteness
        loss = -ll / n + 0.5 * weight_decay * float(params @ params)
    return loss, -g / n + weight_decay * params


def evaluate(model, params, dataset):
    """``(mean cross-entropy, accuracy)`` of one parameter vector on ``dataset``."""
    logits = model.logits(params, dataset.features)
    ll = model.log_likelihoods(params, dataset.features, dataset.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return float(-np.mean(ll)), acc


def sgd_step(params, velocity, grad, lr, momentum):
    velocity = momentum * velocity + grad
    return params - lr * velocity, velocity


def train(model, dataset, config, rng, val_set=None, init=None):
    """Minimize mean cross-entropy with mini-batch SGD + momentum.

    Returns ``(params, history)`` where ``history`` holds one dict per epoch
    with ``epoch``, ``train_loss`` (mean over the epoch's batches),
    ``val_loss`` and ``val_acc`` (NaN without a validation set).
    """
    params = model.init_params(rng) if init is None else np.array(init, dtype=np.float64)
    velocity = np.zeros_like(params)
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses = []
        for idx in shuffled_batches(len(dataset), config.batch_size, rng):
            loss, g = loss_and_grad(model, params, dataset.features[idx], dataset.labels[idx],
                                    config.weight_decay)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch + 1}")
            params, velocity = sgd_step(params, velocity, g, lr, config.momentum)
            losses.append(loss)
        if not np.all(np.isfinite(params)):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}")
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)),
               "val_loss": float("nan"), "val_acc": float("nan")}
        if val_set is not None:
            row["val_loss"], row["val_acc"] = evaluate(model, params, val_set)
        history.append(row)
    return params, history
