"""Thin config-driven training harness for toy-scale experiments.

Full-scale training (large datasets, GPU schedules) is out of scope; this
harness exists so small models can be fitted on synthetic data with the
standard recipe: SGD with momentum and weight decay, a linear warm-up on
momentum, and cosine learning-rate annealing. Augmentation settings are
recorded as configuration passthrough only and never applied here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
import torch.nn as nn


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 120
    lr: float = 0.001
    min_lr: float = 0.00001
    momentum: float = 0.937
    warmup_epochs: int = 3
    warmup_momentum: float = 0.8
    weight_decay: float = 0.0005
    augmentation: dict = field(default_factory=dict)  # recorded, not applied


def fit(
    model: nn.Module,
    batches: Iterable,
    loss_fn: Callable[[nn.Module, object], torch.Tensor],
    cfg: TrainConfig,
) -> list[float]:
    """Run the schedule over ``batches`` once per epoch; returns the mean
    loss per epoch."""
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.lr,
        momentum=cfg.warmup_momentum,
        weight_decay=cfg.weight_decay,
    )
    cached = list(batches)
    history = []
    for epoch in range(cfg.epochs):
        if epoch < cfg.warmup_epochs:
            frac = (epoch + 1) / max(1, cfg.warmup_epochs)
            momentum = cfg.warmup_momentum + frac * (cfg.momentum - cfg.warmup_momentum)
            lr = cfg.lr * frac
        else:
            momentum = cfg.momentum
            progress = (epoch - cfg.warmup_epochs) / max(
                1, cfg.epochs - cfg.warmup_epochs
            )
            lr = cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (
                1.0 + math.cos(math.pi * progress)
            )
        for group in optimizer.param_groups:
            group["lr"] = lr
            group["momentum"] = momentum
        losses = []
        for batch in cached:
            optimizer.zero_grad()
            loss = loss_fn(model, batch)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append(sum(losses) / max(1, len(losses)))
    return history
