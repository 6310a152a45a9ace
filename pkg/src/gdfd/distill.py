"""Teacher-to-student distillation, supervised baselines and evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import Optional, Protocol

import numpy as np

from .data import Dataset
from .losses import cross_entropy_onehot, kd_loss
from .optim import Optimizer, lr_schedule

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "kd_loss", "eval_accuracy")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 60000
    batch_size: int = 256
    base_lr: float = 0.06
    warmup: int = 5000
    decay: float = 0.977
    decay_interval: int = 1000
    momentum: float = 0.9
    temperature: float = 3.0
    eval_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or not 0 <= self.warmup < self.steps:
            raise ValueError("need steps >= 1 and 0 <= warmup < steps")
        if not 0 < self.decay <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def toy(cls, **overrides) -> "DistillConfig":
        """Desk-scale run: step, warmup and decay interval scaled by 1/20, 1/25, 1/10."""
        base = cls(steps=3000, batch_size=64, base_lr=0.05, warmup=200,
                   decay_interval=100, eval_every=200)
        return replace(base, **overrides)

    def lr_at(self, step: int) -> float:
        return lr_schedule(step, self.base_lr, self.warmup, self.decay, self.decay_interval)


# ---------------------------------------------------------------- image sources


class ImageSource(Protocol):
    """Anything that can emit a batch of images for distillation."""

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


class NoiseSource:
    """Standard-normal pixels clipped to the image range."""

    def __init__(self, shape: tuple[int, int, int]):
        self.shape = tuple(shape)

    def sample(self, n, rng):
        return np.clip(rng.standard_normal((n,) + self.shape), -1, 1).astype(np.float32)


class DatasetSource:
    """Cycles through a dataset, reshuffling every epoch. Labels are never emitted."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._order: Optional[np.ndarray] = None
        self._pos = 0

    def sample(self, n, rng):
        picked = []
        while n > 0:
            if self._order is None or self._pos >= len(self._order):
                self._order = rng.permutation(len(self.dataset))
                self._pos = 0
            take = self._order[self._pos:self._pos + n]
            self._pos += len(take)
            n -= len(take)
            picked.append(take)
        return self.dataset.images[np.concatenate(picked)]


class FixedImageSource:
    """Always returns the same image; the degenerate case for coverage checks."""

    def __init__(self, image: np.ndarray):
        self.image = np.asarray(image, dtype=np.float32)

    def sample(self, n, rng):
        return np.repeat(self.image[None], n, axis=0)


# ---------------------------------------------------------------- evaluation


def evaluate(model, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy of an eval-mode forward pass."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = model.predict(dataset.images, batch_size=batch_size)
    return float(np.mean(pred == dataset.labels))


def _check_finite(value: float, step: int, what: str = "loss") -> None:
    if not np.isfinite(value):
        raise DivergenceError(step, what)


def train_classifier(model, dataset: Dataset, cfg: DistillConfig,
                     eval_set: Optional[Dataset] = None):
    """Supervised cross-entropy training with the distillation optimiser settings.

    Returns ``(model, history)`` where history rows use :data:`METRIC_FIELDS`
    (the loss column holds the cross-entropy).
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(model.parameters(), "momentum", momentum=cfg.momentum)
    history = []
    order = rng.permutation(len(dataset))
    pos = 0
    for step in range(cfg.steps):
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(len(dataset))
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        lr = cfg.lr_at(step)
        opt.zero_grad()
        loss = cross_entropy_onehot(model.forward(dataset.images[idx], mode="train"), dataset.labels[idx])
        loss.backward()
        _check_finite(float(loss.data), step)
        opt.step(lr)
        history.append(_row(step, lr, float(loss.data), model, eval_set, cfg))
    return model, history


def _row(step, lr, loss, model, eval_set, cfg):
    acc = None
    if eval_set is not None and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
        acc = evaluate(model, eval_set)
        log.info("step %d lr %.4g loss %.4f acc %.4f", step + 1, lr, loss, acc)
    return {"step": step, "lr": lr, "kd_loss": loss, "eval_accuracy": acc}


def distill(teacher, student, source: ImageSource, cfg: DistillConfig,
            eval_set: Optional[Dataset] = None):
    """Train ``student`` to match the softened teacher outputs on ``source`` images.

    Only images are drawn from the source; ground-truth labels never enter
    the loss. Returns ``(student, history)``.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(student.parameters(), "momentum", momentum=cfg.momentum)
    history = []
    for step in range(cfg.steps):
        images = source.sample(cfg.batch_size, rng)
        t_logits = teacher.forward(images, mode="eval").data
        lr = cfg.lr_at(step)
        opt.zero_grad()
        loss = kd_loss(t_logits, student.forward(images, mode="train"), cfg.temperature)
        loss.backward()
        _check_finite(float(loss.data), step)
        opt.step(lr)
        history.append(_row(step, lr, float(loss.data), student, eval_set, cfg))
    return student, history


def final_accuracy(history) -> Optional[float]:
    for row in reversed(history):
        if row["eval_accuracy"] is not None:
            return row["eval_accuracy"]
    return None


def write_metrics_csv(history, path: str) -> None:
    """``step,lr,kd_loss,eval_accuracy``; evaluation cells are blank between evals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for row in history:
            acc = row["eval_accuracy"]
            writer.writerow([row["step"], repr(float(row["lr"])), repr(float(row["kd_loss"])),
                             "" if acc is None else repr(float(acc))])


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({"step": int(row["step"]), "lr": float(row["lr"]),
                         "kd_loss": float(row["kd_loss"]),
                         "eval_accuracy": float(row["eval_accuracy"]) if row["eval_accuracy"] else None})
        return rows
