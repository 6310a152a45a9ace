"""End-to-end steps shared by the command line and the acceptance suite.

Every function takes the resolved config mapping from
:func:`gdfd.config.parse_config` plus an explicit seed.
"""
from __future__ import annotations

import logging
from typing import Any, Mapping, Optional, Sequence

from .config import distill_config, gen_train_config, loss_weights
from .data import Dataset, gen_toy_dataset
from .distill import DatasetSource, NoiseSource, distill, evaluate, final_accuracy, train_classifier
from .generators import EnsembleHandle, EnsembleSource, train_ensemble
from .losses import MomentTargets
from .models import build_classifier
from .stats import (ClassAssignment, estimate_group_moments_datafree,
                    estimate_group_moments_from_data, extract_running_moments, group_classes,
                    synthesize_class_bank)

log = logging.getLogger(__name__)

Config = Mapping[str, Any]

# loss-weight overrides for the three generator objectives being compared
LOSS_ABLATIONS: dict[str, dict[str, float]] = {
    "ce": {"lambda_s": 0.0},
    "moments": {"lambda_ce": 0.0, "lambda_tv": 0.0, "lambda_l2": 0.0},
    "both": {},
}


def make_data(cfg: Config) -> tuple[Dataset, Dataset]:
    return gen_toy_dataset(cfg["data_seed"], cfg["n_train"], cfg["n_test"], cfg["num_classes"],
                           cfg["image_size"], cfg["channels"])


def new_classifier(cfg: Config, width: float, seed: int):
    return build_classifier(width=width, num_classes=cfg["num_classes"], channels=cfg["channels"],
                            input_size=cfg["image_size"], seed=seed)


def train_teacher(cfg: Config, seed: int, train: Dataset, test: Optional[Dataset] = None):
    """Supervised teacher; returns ``(frozen teacher, history)``."""
    model = new_classifier(cfg, cfg["teacher_width"], seed)
    model, history = train_classifier(model, train, distill_config(cfg, seed, cfg["teacher_steps"]), test)
    return model.freeze(), history


def train_supervised_student(cfg: Config, seed: int, train: Dataset, test: Dataset):
    model = new_classifier(cfg, cfg["student_width"], seed)
    return train_classifier(model, train, distill_config(cfg, seed), test)


def moment_targets(teacher, assignment: ClassAssignment, cfg: Config, seed: int,
                   train: Optional[Dataset] = None) -> list[MomentTargets]:
    """One target set per class subset, from the source named by ``cfg["stats"]``."""
    kind = cfg["stats"]
    if kind == "running":
        return [extract_running_moments(teacher)] * assignment.k
    if kind == "real":
        if train is None:
            raise ValueError("real-sample statistics need a dataset")
        return [estimate_group_moments_from_data(teacher, train, subset, cfg["n_per_class"], seed)
                for subset in assignment.subsets]
    bank = synthesize_class_bank(teacher, cfg["n_per_class"], loss_weights(cfg), cfg["synth_steps"],
                                 seed, cfg["synth_lr"])
    return [estimate_group_moments_datafree(teacher, subset, bank=bank) for subset in assignment.subsets]


def build_ensemble(teacher, cfg: Config, seed: int, train: Optional[Dataset] = None,
                   k: Optional[int] = None, workers: int = 1,
                   overrides: Optional[Mapping[str, float]] = None) -> EnsembleHandle:
    """Group the classes into ``k`` subsets, estimate targets and train one generator each."""
    cfg = dict(cfg, **(overrides or {}))
    assignment = group_classes(cfg["num_classes"], k or cfg["k"])
    targets = moment_targets(teacher, assignment, cfg, seed, train)
    return train_ensemble(teacher, assignment, targets, gen_train_config(cfg, seed), workers=workers)


def make_source(kind: str, ensemble: Optional[EnsembleHandle] = None,
                train: Optional[Dataset] = None, image_shape: Optional[tuple] = None):
    if kind == "ensemble":
        if ensemble is None:
            raise ValueError("ensemble source needs an ensemble")
        return EnsembleSource(ensemble)
    if kind == "dataset":
        if train is None:
            raise ValueError("dataset source needs a dataset")
        return DatasetSource(train)
    if kind == "noise":
        return NoiseSource(image_shape)
    raise ValueError(f"unknown source {kind!r}")


def distill_student(teacher, source, cfg: Config, seed: int, test: Optional[Dataset] = None):
    student = new_classifier(cfg, cfg["student_width"], seed)
    return distill(teacher, student, source, distill_config(cfg, seed), test)


def ablate_losses(teacher, cfg: Config, seed: int, train: Optional[Dataset], test: Dataset,
                  variants: Sequence[str] = ("ce", "moments", "both")) -> list[dict]:
    """Distil one student per generator objective; rows hold ``variant`` and ``accuracy``."""
    rows = []
    for name in variants:
        ensemble = build_ensemble(teacher, cfg, seed, train, overrides=LOSS_ABLATIONS[name])
        student, _ = distill_student(teacher, EnsembleSource(ensemble), cfg, seed, test)
        rows.append({"variant": name, "seed": seed, "accuracy": evaluate(student, test)})
        log.info("ablation %s seed %d accuracy %.4f", name, seed, rows[-1]["accuracy"])
    return rows


def ablate_generators(teacher, cfg: Config, seed: int, train: Optional[Dataset], test: Dataset,
                      ks: Optional[Sequence[int]] = None) -> list[dict]:
    """Distil one student per generator count; defaults to 1, K/2 and K."""
    K = cfg["num_classes"]
    ks = ks or (1, max(1, K // 2), K)
    rows = []
    for k in ks:
        ensemble = build_ensemble(teacher, cfg, seed, train, k=k)
        student, _ = distill_student(teacher, EnsembleSource(ensemble), cfg, seed, test)
        rows.append({"variant": f"k={k}", "seed": seed, "accuracy": evaluate(student, test)})
        log.info("ablation k=%d seed %d accuracy %.4f", k, seed, rows[-1]["accuracy"])
    return rows


def summary_accuracy(history) -> float:
    acc = final_accuracy(history)
    return float("nan") if acc is None else acc

