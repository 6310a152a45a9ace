"""Differentiable objectives for distillation and generator training."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROVENANCES = ("running", "per_class_real", "per_class_datafree", "per_group")


@dataclass(frozen=True)
class LossWeights:
    """Scales of the image-loss terms and the distillation temperature.

    ``lambda_ce`` switches the cross-entropy term; it exists so ablations can
    train on the moment-matching loss alone.
    """

    lambda_tv: float = 6e-3
    lambda_l2: float = 1.5e-5
    lambda_s: float = 10.0
    temperature: float = 3.0
    lambda_ce: float = 1.0

    def __post_init__(self):
        for name in ("lambda_tv", "lambda_l2", "lambda_s", "lambda_ce"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def with_(self, **changes) -> "LossWeights":
        return replace(self, **changes)


@dataclass
class MomentTargets:
    """Per-layer (mean, variance) targets, one pair per teacher BN layer."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    provenance: str = "running"
    classes: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.layers = [(np.asarray(m), np.asarray(v)) for m, v in self.layers]
        for i, (m, v) in enumerate(self.layers):
            if m.shape != v.shape:
                raise ValueError(f"layer {i}: mean {m.shape} vs var {v.shape}")
            if np.any(v < 0):
                raise ValueError(f"layer {i}: negative variance target")

    def __len__(self) -> int:
        return len(self.layers)

    def widths(self) -> list[int]:
        return [m.shape[0] for m, _ in self.layers]

    def check_against(self, model) -> None:
        widths = [state.channels for state in model.bn]
        if widths != self.widths():
            raise RegistryMismatch(f"targets cover layers {self.widths()}, model has {widths}")

    def distance(self, other: "MomentTargets") -> float:
        """Summed per-layer moment distance to ``other`` (plain floats)."""
        total = 0.0
        for (m1, v1), (m2, v2) in zip(self.layers, other.layers):
            total += float(np.linalg.norm(m1 - m2) + np.linalg.norm(v1 - v2))
        return total


class RegistryMismatch(ValueError):
    """Captured moments and targets describe different sets of layers."""


# ---------------------------------------------------------------- classification losses


def kd_loss(teacher_logits, student_logits: Tensor, temperature: float = 3.0) -> Tensor:
    """Batch-mean KL(teacher || student) of temperature-softened outputs, times T^2.

    Teacher logits are treated as constants.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    student_logits = T.as_tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise T.DimensionError(f"kd_loss: teacher {t.shape} vs student {student_logits.shape}")
    dtype = student_logits.dtype
    t = t.astype(dtype) / temperature
    log_pt = t - t.max(axis=1, keepdims=True)
    log_pt = log_pt - np.log(np.exp(log_pt).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(student_logits * (1.0 / temperature), axis=1)
    B = t.shape[0]
    # sum_i p_i (log p_i - log q_i); the entropy part is a constant
    entropy_part = float(np.sum(pt * log_pt))
    cross = T.tsum(log_ps * Tensor(pt)) * (-1.0)
    return (cross + entropy_part) * (temperature ** 2 / B)


def cross_entropy_onehot(logits: Tensor, labels) -> Tensor:
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise T.DimensionError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    logp = T.log_softmax(logits, axis=1)
    picked = T.tsum(logp * Tensor(T.one_hot(labels, K, dtype=logits.dtype)))
    return picked * (-1.0 / B)


# ---------------------------------------------------------------- image priors


def tv_loss(images: Tensor) -> Tensor:
    """Anisotropic squared total variation, summed per image, averaged over the batch."""
    images = T.as_tensor(images)
    x = images.data
    dh = x[:, :, :, 1:] - x[:, :, :, :-1]
    dv = x[:, :, 1:, :] - x[:, :, :-1, :]
    B = x.shape[0]
    value = (np.sum(dh * dh) + np.sum(dv * dv)) / B

    def fn(g):
        grad = np.zeros_like(x)
        grad[:, :, :, 1:] += 2 * dh
        grad[:, :, :, :-1] -= 2 * dh
        grad[:, :, 1:, :] += 2 * dv
        grad[:, :, :-1, :] -= 2 * dv
        return (grad * (g / B),)

    return T._node(np.asarray(value, dtype=x.dtype), (images,), fn, "tv_loss")


def l2_image_loss(images: Tensor) -> Tensor:
    """Squared Euclidean norm per image, averaged over the batch."""
    images = T.as_tensor(images)
    return T.tsum(images * images) * (1.0 / images.shape[0])


def inceptionism_loss(teacher_logits: Tensor, labels, images: Tensor,
                      weights: LossWeights = LossWeights()) -> Tensor:
    loss = cross_entropy_onehot(teacher_logits, labels) * weights.lambda_ce
    if weights.lambda_tv:
        loss = loss + tv_loss(images) * weights.lambda_tv
    if weights.lambda_l2:
        loss = loss + l2_image_loss(images) * weights.lambda_l2
    return loss


# ---------------------------------------------------------------- moment matching


def _as_param(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype or np.float64))


def gaussian_kl(mean_hat, var_hat, mean, var):
    """KL(N(mean_hat, var_hat) || N(mean, var)) summed over channels.

    Accepts arrays or tensors; returns a float for plain inputs and a tensor
    when any argument is a tensor.
    """
    args = [mean_hat, var_hat, mean, var]
    tracked = any(isinstance(a, Tensor) for a in args)
    dtype = next((a.dtype for a in args if isinstance(a, Tensor)), np.float64)
    mh, vh, m, v = (_as_param(a, dtype) for a in args)
    if np.any(vh.data <= 0) or np.any(v.data <= 0):
        raise ValueError("gaussian_kl needs strictly positive variances")
    diff = m - mh
    per_channel = (T.log(v) - T.log(vh)) * 0.5 - (1.0 - (vh + diff * diff) / v) * 0.5
    out = T.tsum(per_channel)
    return out if tracked else float(out.data)


def moment_l2(mean, var, mean_hat, var_hat):
    """||mean - mean_hat||_2 + ||var - var_hat||_2 (unsquared norms)."""
    args = [mean, var, mean_hat, var_hat]
    tracked = any(isinstance(a, Tensor) for a in args)
    dtype = next((a.dtype for a in args if isinstance(a, Tensor)), np.float64)
    m, v, mh, vh = (_as_param(a, dtype) for a in args)
    if m.shape != mh.shape or v.shape != vh.shape:
        raise T.DimensionError(f"moment_l2: {m.shape}/{v.shape} vs {mh.shape}/{vh.shape}")
    out = T.l2norm(m - mh) + T.l2norm(v - vh)
    return out if tracked else float(out.data)


def moment_matching_loss(captured: Sequence[tuple[Tensor, Tensor]], targets: MomentTargets,
                         lambda_s: float = 10.0) -> Tensor:
    if len(captured) != len(targets.layers):
        raise RegistryMismatch(f"{len(captured)} captured layers vs {len(targets.layers)} targets")
    total: Optional[Tensor] = None
    for i, ((mu, var), (mh, vh)) in enumerate(zip(captured, targets.layers)):
        if mu.shape != mh.shape:
            raise RegistryMismatch(f"layer {i}: captured width {mu.shape} vs target {mh.shape}")
        term = moment_l2(mu, var, mh.astype(mu.dtype), vh.astype(var.dtype))
        total = term if total is None else total + term
    if total is None:
        raise RegistryMismatch("no batch-norm layers to match")
    return total * lambda_s


# ---------------------------------------------------------------- composite objectives


def image_loss(teacher, images, labels, targets: MomentTargets,
               weights: LossWeights = LossWeights(), return_parts: bool = False):
    """Inceptionism plus moment-matching loss from one frozen-teacher pass.

    With ``return_parts`` a dict of plain-float components is returned
    alongside the scalar tensor.
    """
    images = T.as_tensor(images)
    logits, moments = teacher.forward(images, mode="capture", return_moments=True)
    inc = inceptionism_loss(logits, labels, images, weights)
    loss = inc
    mm = None
    if weights.lambda_s:
        mm = moment_matching_loss(moments, targets, weights.lambda_s)
        loss = inc + mm
    if not return_parts:
        return loss
    parts = {
        "inceptionism": float(inc.data),
        "moments": float(mm.data) if mm is not None else 0.0,
        "total": float(loss.data),
    }
    return loss, parts


def generator_objective(generator, teacher, z, y_local, targets: MomentTargets,
                        weights: LossWeights = LossWeights(), classes: Optional[Sequence[int]] = None,
                        return_parts: bool = False):
    """Monte-Carlo estimate of the generator objective on one latent batch.

    ``y_local`` indexes the generator's conditioning classes; ``classes``
    maps those indices to teacher labels (identity when omitted).
    """
    y_local = np.asarray(y_local, dtype=np.int64)
    classes = tuple(range(generator.num_classes)) if classes is None else tuple(classes)
    if len(classes) != generator.num_classes:
        raise ValueError(f"generator serves {generator.num_classes} classes, got subset {classes}")
    if y_local.size and (y_local.min() < 0 or y_local.max() >= len(classes)):
        raise ValueError("label outside the generator's class subset")
    images = generator.forward(z, y_local, mode="train")
    labels = np.asarray(classes, dtype=np.int64)[y_local]
    return image_loss(teacher, images, labels, targets, weights, return_parts=return_parts)
