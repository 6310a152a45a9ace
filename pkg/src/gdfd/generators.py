"""Training single generators and class-partitioned ensembles."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .distill import DivergenceError
from .losses import LossWeights, MomentTargets, generator_objective
from .models import Generator, GeneratorConfig, LabelPrior, LatentSpec
from .optim import Optimizer
from .stats import ClassAssignment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenTrainConfig:
    steps: int = 10000
    batch_size: int = 256
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    latent_dim: int = 1024
    widths: tuple[int, ...] = (128, 128, 64)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")

    @classmethod
    def toy(cls, **overrides) -> "GenTrainConfig":
        base = cls(steps=400, batch_size=64, latent_dim=64, widths=(16, 16, 8))
        return replace(base, **overrides)

    def generator_config(self, teacher, num_classes: int) -> GeneratorConfig:
        C, H, _ = teacher.input_shape
        return GeneratorConfig(latent_dim=self.latent_dim, num_classes=num_classes, channels=C,
                               target_size=H, widths=tuple(self.widths))


def member_seed(base_seed: int, generator_id: int) -> int:
    """Seed of ensemble member ``generator_id``; independent of training order."""
    return int(np.random.SeedSequence([base_seed, generator_id]).generate_state(1)[0])


def train_generator(teacher, targets: MomentTargets, class_subset: Sequence[int],
                    cfg: GenTrainConfig, return_parts: bool = False):
    """Fit a generator for ``class_subset`` against a frozen teacher.

    Returns ``(generator, history)``; history holds one total loss per step,
    or one dict of loss components per step with ``return_parts``.
    """
    targets.check_against(teacher)
    prior = LabelPrior(tuple(class_subset))
    gen = Generator(cfg.generator_config(teacher, len(prior.classes)), seed=cfg.seed)
    latent = LatentSpec(cfg.latent_dim)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Optimizer(gen.parameters(), "adam", beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    history = []
    for step in range(cfg.steps):
        z = latent.sample(cfg.batch_size, rng)
        y = prior.sample_local(cfg.batch_size, rng)
        opt.zero_grad()
        loss, parts = generator_objective(gen, teacher, z, y, targets, cfg.weights,
                                          classes=prior.classes, return_parts=True)
        if not np.isfinite(parts["total"]):
            raise DivergenceError(step)
        loss.backward()
        opt.step(cfg.lr)
        history.append(parts if return_parts else parts["total"])
    return gen, history


@dataclass
class EnsembleMember:
    generator: Generator
    classes: tuple[int, ...]
    targets: MomentTargets
    history: list = field(default_factory=list)


@dataclass
class EnsembleHandle:
    members: list[EnsembleMember]
    assignment: ClassAssignment
    latent: LatentSpec

    def __post_init__(self):
        if len(self.members) != self.assignment.k:
            raise ValueError("member count differs from the class assignment")
        for member, subset in zip(self.members, self.assignment.subsets):
            if tuple(member.classes) != tuple(subset):
                raise ValueError(f"member classes {member.classes} != assigned {subset}")
            if member.generator.num_classes != len(subset):
                raise ValueError("generator conditioning width differs from its subset size")

    @property
    def k(self) -> int:
        return len(self.members)


class MemberTrainingError(RuntimeError):
    def __init__(self, generator_id: int, cause: Exception):
        super().__init__(f"generator {generator_id} failed: {cause}")
        self.generator_id = generator_id


def train_ensemble(teacher, assignment: ClassAssignment,
                   per_subset_targets: Sequence[MomentTargets], cfg: GenTrainConfig,
                   workers: int = 1) -> EnsembleHandle:
    """Train one generator per class subset; member ``g`` uses seed ``member_seed(cfg.seed, g)``."""
    if len(per_subset_targets) != assignment.k:
        raise ValueError(f"{assignment.k} subsets but {len(per_subset_targets)} target sets")

    def job(g: int) -> EnsembleMember:
        try:
            gen, hist = train_generator(teacher, per_subset_targets[g], assignment.subsets[g],
                                        replace(cfg, seed=member_seed(cfg.seed, g)))
        except Exception as exc:
            raise MemberTrainingError(g, exc) from exc
        log.info("generator %d/%d done, final loss %.4f", g + 1, assignment.k, hist[-1])
        return EnsembleMember(gen, tuple(assignment.subsets[g]), per_subset_targets[g], hist)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(job, range(assignment.k)))
    else:
        members = [job(g) for g in range(assignment.k)]
    return EnsembleHandle(members, assignment, LatentSpec(cfg.latent_dim))


def sample_ensemble(ensemble: EnsembleHandle, batch: int, seed=0, mode: str = "eval"):
    """Draw ``batch`` images: a uniformly chosen member per sample, then z and y.

    Returns ``(images, labels, generator_ids)``; labels are teacher classes.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _sample(ensemble, batch, rng, mode)


def _sample(ensemble: EnsembleHandle, batch: int, rng: np.random.Generator, mode: str):
    if ensemble.k == 0:
        raise ValueError("empty ensemble")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    gids = rng.integers(0, ensemble.k, size=batch)
    z = ensemble.latent.sample(batch, rng)
    local = np.zeros(batch, dtype=np.int64)
    labels = np.zeros(batch, dtype=np.int64)
    images = None
    for g in range(ensemble.k):
        idx = np.flatnonzero(gids == g)
        if idx.size == 0:
            continue
        member = ensemble.members[g]
        prior = LabelPrior(member.classes)
        local[idx] = prior.sample_local(idx.size, rng)
        labels[idx] = np.asarray(member.classes)[local[idx]]
        out = _generate(member.generator, z[idx], local[idx], mode)
        if images is None:
            images = np.empty((batch,) + out.shape[1:], dtype=out.dtype)
        images[idx] = out
    return images, labels, gids


def _generate(gen: Generator, z, y, mode: str) -> np.ndarray:
    # batch statistics are undefined for one sample; fall back to running moments
    if mode == "batch" and len(z) < 2:
        mode = "eval"
    return gen.forward(z, y, mode=mode).data


class EnsembleSource:
    """Adapter so an ensemble can feed :func:`gdfd.distill.distill`."""

    def __init__(self, ensemble: EnsembleHandle, mode: str = "eval"):
        self.ensemble = ensemble
        self.mode = mode

    def sample(self, n, rng):
        return _sample(self.ensemble, n, rng, self.mode)[0]


# ---------------------------------------------------------------- mode collapse diagnostics


@dataclass
class CoverageReport:
    histogram: np.ndarray
    coverage: float
    diversity: np.ndarray  # mean per-pixel variance of images predicted as each class; nan if none

    def collapsed_classes(self, reference: np.ndarray, ratio: float = 0.25) -> list[int]:
        """Classes that are missing or whose diversity is below ``ratio`` x reference."""
        out = []
        for c, (count, div) in enumerate(zip(self.histogram, self.diversity)):
            if count == 0 or not np.isfinite(div) or div < ratio * reference[c]:
                out.append(c)
        return out


def class_coverage(teacher, source, n_samples: int, seed=0, num_classes: Optional[int] = None,
                   batch_size: int = 500) -> CoverageReport:
    """Teacher-argmax histogram and per-class pixel diversity of ``n_samples`` images."""
    K = num_classes or teacher.num_classes
    if n_samples < K:
        raise ValueError(f"need at least {K} samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    images, preds = [], []
    remaining = n_samples
    while remaining > 0:
        n = min(batch_size, remaining)
        batch = source.sample(n, rng)
        images.append(batch)
        preds.append(teacher.predict(batch))
        remaining -= n
    images = np.concatenate(images)
    preds = np.concatenate(preds)
    hist = np.bincount(preds, minlength=K)
    diversity = np.full(K, np.nan)
    for c in range(K):
        sel = images[preds == c]
        if len(sel) >= 2:
            diversity[c] = float(sel.reshape(len(sel), -1).var(axis=0).mean())
        elif len(sel) == 1:
            diversity[c] = 0.0
    return CoverageReport(hist, float(np.count_nonzero(hist) / K), diversity)
