"""SGD with momentum, L2 weight decay and a one-cycle triangular learning rate."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import models
from .datagen import DatasetHandle, ablate_channels
from .seeding import rng as derive_rng


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, loss: float, report: TrainReport):
        super().__init__(f"training diverged at step {step} (loss {loss})")
        self.step = step
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_max: float = 0.1
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    schedule: str = "triangular"
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr_max > self.lr_min >= 0:
            raise ValueError(f"need lr_max > lr_min >= 0, got {self.lr_max}, {self.lr_min}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.schedule != "triangular":
            raise ValueError(f"unsupported schedule {self.schedule!r}")


PRESETS: dict[str, TrainConfig] = {
    "s3-miniresnet": TrainConfig(epochs=30, lr_max=0.1, weight_decay=1e-5),
    "s3-mlp": TrainConfig(epochs=50, lr_max=0.2, weight_decay=0.0),
    "s3-lenet": TrainConfig(epochs=50, lr_max=0.2, weight_decay=0.0),
    "s4-mlp": TrainConfig(epochs=60, lr_max=0.15, weight_decay=1e-5),
    "s4-lenet": TrainConfig(epochs=40, lr_max=0.15, weight_decay=1e-5),
    "s4-miniresnet": TrainConfig(epochs=40, lr_max=0.15, weight_decay=1e-5),
}
PRESETS["s3-linear"] = PRESETS["s3-mlp"]
PRESETS["s4-linear"] = PRESETS["s4-mlp"]


def preset(name: str, **overrides) -> TrainConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown training preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_lrs: list[float] = field(default_factory=list)
    final_train_accuracy: float = math.nan
    steps: int = 0
    wall_time: float = 0.0
    diverged: bool = False
    config: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "lr_at_epoch_end"])
            for i, (loss, lr) in enumerate(zip(self.epoch_losses, self.epoch_lrs), start=1):
                w.writerow([i, repr(float(loss)), repr(float(lr))])

    def metadata(self) -> str:
        items = {**{f"train.{k}": v for k, v in self.config.items()},
                 "steps": self.steps, "final_train_accuracy": self.final_train_accuracy,
                 "diverged": self.diverged}
        return "".join(f"{k} = {v}\n" for k, v in items.items())


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """One triangle over the whole run: lr_min -> lr_max at the midpoint -> lr_min."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    half = total_steps / 2
    frac = step / half if step <= half else (total_steps - step) / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(spec: models.ModelSpec, params: models.ParamVector, data: DatasetHandle,
          cfg: TrainConfig) -> tuple[models.ParamVector, TrainReport]:
    """Minimize the mean logistic loss with momentum SGD.

    Update per step: ``vel = momentum * vel - lr * (grad + wd * theta)``, then
    ``theta += vel``. The last partial batch of each epoch is kept.
    """
    if data.split != "train":
        raise ValueError(f"train() expects the train split, got {data.split!r}")
    if data.shape != spec.input_shape:
        raise ValueError(f"data shape {data.shape} does not match model input {spec.input_shape}")
    n = len(data)
    per_epoch = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * per_epoch
    dtype = params.data.dtype
    theta = np.array(params.data, dtype=dtype, copy=True)
    vel = np.zeros_like(theta)
    wd = dtype.type(cfg.weight_decay)
    mom = dtype.type(cfg.momentum)
    report = TrainReport(config=asdict(cfg))
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.shuffle_seed, "train:shuffle", epoch).permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            current = params.with_data(theta)
            loss, bundle = models.gradients(spec, current, data.images[idx], data.labels[idx])
            if not math.isfinite(loss):
                report.diverged = True
                report.steps = step
                report.wall_time = time.perf_counter() - start
                raise DivergenceError(step, loss, report)
            lr = dtype.type(lr_at(step, total, cfg))
            vel *= mom
            vel -= lr * (bundle.param_grads + wd * theta)
            theta += vel
            loss_sum += loss * idx.size
            step += 1
        report.epoch_losses.append(loss_sum / n)
        report.epoch_lrs.append(lr_at(step - 1, total, cfg))
    report.steps = step
    trained = params.with_data(theta)
    report.final_train_accuracy = evaluate_accuracy(spec, trained, data, allow_train=True)
    report.wall_time = time.perf_counter() - start
    return trained, report


def evaluate_accuracy(spec: models.ModelSpec, params: models.ParamVector, data: DatasetHandle,
                      keep_channels: Iterable[int] | None = None, allow_train: bool = False) -> float:
    """Fraction of samples with sign(logit) == label, optionally after zeroing channels."""
    if data.split != "test" and not allow_train:
        raise ValueError("evaluate_accuracy on a train split needs allow_train=True")
    x = data.images if keep_channels is None else ablate_channels(data.images, keep_channels)
    if len(data) == 0:
        return math.nan
    pred = models.classify(models.predict(spec, params, x))
    return float(np.count_nonzero(pred == data.labels)) / len(data)


def write_metadata(path, report: TrainReport) -> None:
    Path(path).write_text(report.metadata())
