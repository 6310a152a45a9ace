"""Flat ``key = value`` run configuration with typed defaults.

Resolution order is command-line overrides, then the config file, then the
defaults below. Hyperparameters default to the full-method values; step
counts and network sizes default to the 16x16 toy scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional

from .distill import DistillConfig
from .generators import GenTrainConfig
from .losses import LossWeights


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.key = key
        self.line = line


class UnknownKeyError(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


@dataclass(frozen=True)
class _Key:
    kind: type
    default: Any
    help: str


def _ints(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


KEYS: dict[str, _Key] = {
    # data
    "data_seed": _Key(int, 0, "seed of the procedural dataset"),
    "n_train": _Key(int, 5000, "training images"),
    "n_test": _Key(int, 1000, "test images"),
    "num_classes": _Key(int, 10, "number of classes K"),
    "image_size": _Key(int, 16, "image side length"),
    "channels": _Key(int, 1, "image channels"),
    # classifiers
    "teacher_width": _Key(float, 1.0, "teacher channel multiplier"),
    "student_width": _Key(float, 0.5, "student channel multiplier"),
    "teacher_steps": _Key(int, 1500, "supervised teacher steps"),
    # distillation / supervised schedule
    "steps": _Key(int, 3000, "distillation steps"),
    "batch_size": _Key(int, 64, "distillation batch size"),
    "base_lr": _Key(float, 0.05, "peak momentum-SGD learning rate"),
    "warmup": _Key(int, 200, "linear warmup steps"),
    "decay": _Key(float, 0.977, "learning-rate decay factor"),
    "decay_interval": _Key(int, 100, "steps between decays"),
    "momentum": _Key(float, 0.9, "heavy-ball momentum"),
    "temperature": _Key(float, 3.0, "distillation temperature"),
    "eval_every": _Key(int, 200, "steps between evaluations"),
    # generators
    "gen_steps": _Key(int, 400, "generator training steps"),
    "gen_batch_size": _Key(int, 64, "generator batch size"),
    "lr": _Key(float, 1e-3, "generator Adam learning rate"),
    "beta1": _Key(float, 0.9, "Adam beta1"),
    "beta2": _Key(float, 0.999, "Adam beta2"),
    "adam_eps": _Key(float, 1e-8, "Adam epsilon"),
    "latent_dim": _Key(int, 64, "latent size"),
    "gen_widths": _Key(tuple, (16, 16, 8), "generator block widths"),
    # loss weights
    "lambda_tv": _Key(float, 6e-3, "total-variation weight"),
    "lambda_l2": _Key(float, 1.5e-5, "squared l2 image weight"),
    "lambda_s": _Key(float, 10.0, "moment-matching weight"),
    "lambda_ce": _Key(float, 1.0, "cross-entropy weight"),
    # statistics
    "stats": _Key(str, "real", "moment source: running, real or datafree"),
    "n_per_class": _Key(int, 100, "images per class for per-class moments"),
    "synth_steps": _Key(int, 300, "pixel-optimisation steps for data-free moments"),
    "synth_lr": _Key(float, 0.05, "pixel-optimisation learning rate"),
    "k": _Key(int, 10, "number of generators"),
}

_STATS = ("running", "real", "datafree")


def _convert(key: str, text: str, line: Optional[int]):
    spec = KEYS[key]
    try:
        if spec.kind is tuple:
            return _ints(text)
        if spec.kind is int:
            return int(text)
        if spec.kind is float:
            return float(text)
        value = text.strip()
    except ValueError:
        raise ConfigTypeError(f"{key}: expected {spec.kind.__name__}, got {text!r}", key, line) from None
    if key == "stats" and value not in _STATS:
        raise ConfigTypeError(f"stats: expected one of {', '.join(_STATS)}, got {value!r}", key, line)
    return value


def _split(entry: str, line: Optional[int]) -> tuple[str, str]:
    if "=" not in entry:
        raise ConfigError(f"expected 'key = value', got {entry!r}", None, line)
    key, value = (part.strip() for part in entry.split("=", 1))
    if key not in KEYS:
        raise UnknownKeyError(f"unknown key {key!r}", key, line)
    if not value:
        raise ConfigError(f"{key}: missing value", key, line)
    return key, value


def parse_config(text: str = "", overrides: Iterable[str] | Mapping[str, Any] = ()) -> dict[str, Any]:
    """Resolve defaults, then ``text``, then ``overrides`` (``"k=v"`` strings or a mapping)."""
    resolved = {key: spec.default for key, spec in KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        entry = raw.split("#", 1)[0].strip()
        if not entry:
            continue
        key, value = _split(entry, lineno)
        resolved[key] = _convert(key, value, lineno)
    if isinstance(overrides, Mapping):
        items = [(k, v) for k, v in overrides.items()]
    else:
        items = [_split(o, None) for o in overrides]
    for key, value in items:
        if key not in KEYS:
            raise UnknownKeyError(f"unknown key {key!r}", key)
        resolved[key] = _convert(key, str(value) if not isinstance(value, tuple)
                                 else ",".join(map(str, value)), None)
    return resolved


def format_config(cfg: Mapping[str, Any]) -> str:
    """Inverse of :func:`parse_config` for a resolved mapping."""
    lines = []
    for key in KEYS:
        value = cfg[key]
        lines.append(f"{key} = {','.join(map(str, value)) if isinstance(value, tuple) else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- typed views


def loss_weights(cfg: Mapping[str, Any]) -> LossWeights:
    return LossWeights(lambda_tv=cfg["lambda_tv"], lambda_l2=cfg["lambda_l2"],
                       lambda_s=cfg["lambda_s"], temperature=cfg["temperature"],
                       lambda_ce=cfg["lambda_ce"])


def distill_config(cfg: Mapping[str, Any], seed: int, steps: Optional[int] = None) -> DistillConfig:
    return DistillConfig(steps=steps or cfg["steps"], batch_size=cfg["batch_size"],
                         base_lr=cfg["base_lr"], warmup=cfg["warmup"], decay=cfg["decay"],
                         decay_interval=cfg["decay_interval"], momentum=cfg["momentum"],
                         temperature=cfg["temperature"], eval_every=cfg["eval_every"], seed=seed)


def gen_train_config(cfg: Mapping[str, Any], seed: int) -> GenTrainConfig:
    return GenTrainConfig(steps=cfg["gen_steps"], batch_size=cfg["gen_batch_size"], lr=cfg["lr"],
                          weights=loss_weights(cfg), seed=seed, latent_dim=cfg["latent_dim"],
                          widths=tuple(cfg["gen_widths"]), beta1=cfg["beta1"],
                          beta2=cfg["beta2"], adam_eps=cfg["adam_eps"])
