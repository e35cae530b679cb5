"""Momentum SGD with a staircase learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from acnet import autograd as ag
from acnet.blocks import Model
from acnet.data import AugmentConfig, Dataset, augment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    schedule: tuple[tuple[int, float], ...] = ((0, 0.1), (5, 0.01), (7, 0.001), (9, 0.0001))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not self.schedule or self.schedule[0][0] != 0:
            raise ValueError("schedule must start at epoch 0")
        if any(rate <= 0 for _, rate in self.schedule):
            raise ValueError("learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        rate = self.schedule[0][1]
        for start, r in self.schedule:
            if epoch >= start:
                rate = r
        return rate


def staircase(epochs: int, rates=(0.1, 0.01, 0.001, 0.0001)) -> tuple[tuple[int, float], ...]:
    """Split ``epochs`` so the rates step down at 50%, 75% and 90% of training."""
    marks = [0, int(epochs * 0.5), int(epochs * 0.75), int(epochs * 0.9)]
    out = []
    for start, rate in zip(marks, rates):
        if not out or start > out[-1][0]:
            out.append((start, rate))
    return tuple(out)


class SGD:
    """theta <- theta - lr * (buffer + decay * theta), buffer <- momentum * buffer + grad."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {p.id: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float):
        for p in self.params:
            buf = self.buffers[p.id]
            buf *= self.momentum
            buf += p.grad
            p.data -= (lr * (buf + self.weight_decay * p.data)).astype(p.data.dtype)
            p.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def sgd_step(optimizer: SGD, config: TrainConfig, epoch: int):
    optimizer.step(config.lr_at(epoch))


def fit(model: Model, train: Dataset, config: TrainConfig, eval_data: Dataset | None = None,
        on_epoch=None) -> list[dict]:
    """Train ``model`` in place; returns one log row per epoch."""
    rng = np.random.default_rng(config.seed)
    opt = SGD(model.params(), config.momentum, config.weight_decay)
    images = train.images.astype(model.dtype)
    rows = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            x = images[idx]
            if config.augment is not None:
                x = augment(x, config.augment, rng)
            loss = ag.softmax_cross_entropy(model.forward(x, train=True), train.labels[idx])
            ag.backward(loss)
            opt.step(lr)
            losses.append(float(loss.data))
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        row["eval_acc"] = model.accuracy(eval_data.images, eval_data.labels) if eval_data else float("nan")
        log.info("epoch %d lr %g loss %.4f eval %.2f", epoch, lr, row["train_loss"], row["eval_acc"])
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return rows
