"""Moment targets for generator training and class grouping for ensembles."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .distill import DivergenceError
from .losses import LossWeights, MomentTargets, image_loss
from .optim import OptimizerState, adam_step


class UnsupportedModelError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def extract_running_moments(teacher) -> MomentTargets:
    """Copy the running (mean, var) of every batch-norm layer in depth order."""
    if not teacher.bn:
        raise UnsupportedModelError("model has no batch-norm layers")
    layers = [(state.running_mean.copy(), state.running_var.copy()) for state in teacher.bn]
    return MomentTargets(layers, "running", tuple(range(teacher.num_classes)))


def measure_moments(teacher, images: np.ndarray, provenance: str,
                    classes: Sequence[int] = ()) -> MomentTargets:
    """Batch moments of ``images`` at every BN layer; the teacher is not modified."""
    images = np.asarray(images)
    if len(images) < 2:
        raise InsufficientDataError("moment estimation needs at least two images")
    _, moments = teacher.forward(images, mode="capture", return_moments=True)
    layers = [(mu.data.copy(), var.data.copy()) for mu, var in moments]
    return MomentTargets(layers, provenance, tuple(classes))


def _pick(dataset: Dataset, class_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.flatnonzero(dataset.labels == class_id)
    if len(pool) < n:
        raise InsufficientDataError(f"class {class_id} has {len(pool)} images, need {n}")
    return dataset.images[np.sort(rng.choice(pool, size=n, replace=False))]


def estimate_class_moments_from_data(teacher, dataset: Dataset, class_id: int,
                                     n_per_class: int = 100, seed: int = 0) -> MomentTargets:
    if n_per_class < 2:
        raise InsufficientDataError("need at least two images per class")
    images = _pick(dataset, class_id, n_per_class, np.random.default_rng([seed, class_id]))
    return measure_moments(teacher, images, "per_class_real", (class_id,))


def estimate_group_moments_from_data(teacher, dataset: Dataset, classes: Sequence[int],
                                     n_per_class: int = 100, seed: int = 0) -> MomentTargets:
    """Pooled moments of ``n_per_class`` real images from each class of a group."""
    classes = tuple(int(c) for c in classes)
    if len(classes) == 1:
        return estimate_class_moments_from_data(teacher, dataset, classes[0], n_per_class, seed)
    images = np.concatenate([_pick(dataset, c, n_per_class, np.random.default_rng([seed, c]))
                             for c in classes])
    return measure_moments(teacher, images, "per_group", classes)


def synthesize_images_direct(teacher, labels, targets: MomentTargets,
                             weights: LossWeights = LossWeights(), steps: int = 2000,
                             seed: int = 0, lr: float = 0.05, init_scale: float = 0.1,
                             return_history: bool = False):
    """Optimise a batch of pixels directly against the image loss.

    Pixels start at ``init_scale`` times standard normal noise and are
    clamped to [-1, 1] after the last step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    pixels = T.Tensor((rng.standard_normal((len(labels),) + teacher.input_shape) * init_scale)
                      .astype(T.DEFAULT_DTYPE), requires_grad=True)
    state = OptimizerState.adam([pixels])
    history = []
    for step in range(steps):
        pixels.grad = None
        loss = image_loss(teacher, pixels, labels, targets, weights)
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(step)
        history.append(value)
        loss.backward()
        adam_step([pixels], [pixels.grad], state, lr)
    images = np.clip(pixels.data, -1, 1)
    if return_history:
        return images, history
    return images


def synthesize_class_bank(teacher, n_per_class: int = 100, weights: LossWeights = LossWeights(),
                          steps: int = 2000, seed: int = 0, lr: float = 0.05,
                          classes: Optional[Sequence[int]] = None) -> tuple[np.ndarray, np.ndarray]:
    """``n_per_class`` synthetic images for every class, optimised as one batch.

    The running moments describe the whole training mixture, so they are
    matched on a class-balanced batch; a batch of a single class cannot
    reach them without drifting away from that class.
    Returns ``(images, labels)``.
    """
    if n_per_class < 2:
        raise InsufficientDataError("need at least two images per class")
    classes = tuple(range(teacher.num_classes)) if classes is None else tuple(int(c) for c in classes)
    labels = np.repeat(np.asarray(classes, dtype=np.int64), n_per_class)
    images = synthesize_images_direct(teacher, labels, extract_running_moments(teacher), weights,
                                      steps, seed=seed, lr=lr)
    return images, labels


def estimate_group_moments_datafree(teacher, classes: Sequence[int], n_per_class: int = 100,
                                    weights: LossWeights = LossWeights(), steps: int = 2000,
                                    seed: int = 0, lr: float = 0.05,
                                    bank: Optional[tuple[np.ndarray, np.ndarray]] = None) -> MomentTargets:
    """Moments of the synthetic images of ``classes`` taken from a class bank.

    Pass ``bank`` (from :func:`synthesize_class_bank`) to share one
    synthesis run between several groups.
    """
    classes = tuple(int(c) for c in classes)
    if bank is None:
        bank = synthesize_class_bank(teacher, n_per_class, weights, steps, seed, lr)
    images, labels = bank
    picked = images[np.isin(labels, classes)]
    if len(classes) == 1:
        return measure_moments(teacher, picked, "per_class_datafree", classes)
    return measure_moments(teacher, picked, "per_group", classes)


def estimate_class_moments_datafree(teacher, class_id: int, n: int = 100,
                                    weights: LossWeights = LossWeights(), steps: int = 2000,
                                    seed: int = 0, lr: float = 0.05,
                                    bank: Optional[tuple[np.ndarray, np.ndarray]] = None) -> MomentTargets:
    """Per-class moments measured on images synthesised from the teacher alone."""
    return estimate_group_moments_datafree(teacher, (class_id,), n, weights, steps, seed, lr, bank)


# ---------------------------------------------------------------- grouping


@dataclass(frozen=True)
class ClassAssignment:
    """Partition of classes among ``k`` generators."""

    subsets: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.subsets)

    @property
    def num_classes(self) -> int:
        return sum(len(s) for s in self.subsets)

    @property
    def class_to_generator(self) -> dict[int, int]:
        return {c: g for g, subset in enumerate(self.subsets) for c in subset}

    def validate(self) -> None:
        seen = [c for s in self.subsets for c in s]
        if any(len(s) == 0 for s in self.subsets):
            raise ValueError("every generator needs at least one class")
        if sorted(seen) != list(range(len(seen))):
            raise ValueError("classes must be partitioned exactly once")


def group_classes(num_classes: int, k: int, seed: Optional[int] = None,
                  shuffle: bool = False) -> ClassAssignment:
    """Contiguous balanced split of ``range(num_classes)`` into ``k`` groups.

    The first ``num_classes % k`` groups get one extra class. With
    ``shuffle`` the class order is permuted by ``seed`` first.
    """
    if not 1 <= k <= num_classes:
        raise ValueError(f"need 1 <= k <= {num_classes}, got k={k}")
    order = np.arange(num_classes)
    if shuffle:
        order = np.random.default_rng(seed).permutation(num_classes)
    q, r = divmod(num_classes, k)
    subsets = []
    start = 0
    for g in range(k):
        size = q + (1 if g < r else 0)
        subsets.append(tuple(sorted(int(c) for c in order[start:start + size])))
        start += size
    assignment = ClassAssignment(tuple(subsets))
    assignment.validate()
    return assignment
