"""Classifier and conditional generator networks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor


class ConfigError(ValueError):
    """An architecture cannot be built from the requested configuration."""


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


class Module:
    """Parameter bookkeeping shared by the classifier and the generator."""

    params: dict[str, Tensor]
    bn: list[BatchNormState]

    def parameters(self) -> list[Tensor]:
        out = list(self.params.values())
        for state in self.bn:
            out.extend([state.gamma, state.beta])
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        named = dict(self.params)
        for i, state in enumerate(self.bn):
            named[f"bn{i}/gamma"] = state.gamma
            named[f"bn{i}/beta"] = state.beta
        return named

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every parameter and batch-norm buffer, keyed by a stable name."""
        out = {name: p.data for name, p in self.named_parameters().items()}
        for i, state in enumerate(self.bn):
            out[f"bn{i}/running_mean"] = state.running_mean
            out[f"bn{i}/running_var"] = state.running_var
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        expected = set(named) | {f"bn{i}/running_{s}" for i in range(len(self.bn))
                                 for s in ("mean", "var")}
        missing = expected - set(arrays)
        if missing:
            raise KeyError(f"state dict is missing {sorted(missing)}")
        for name, p in named.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)
        for i, state in enumerate(self.bn):
            state.running_mean = np.array(arrays[f"bn{i}/running_mean"], dtype=state.running_mean.dtype)
            state.running_var = np.array(arrays[f"bn{i}/running_var"], dtype=state.running_var.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


# ---------------------------------------------------------------- classifier


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int = 10
    channels: int = 1
    input_size: int = 16
    width: float = 1.0
    base_widths: tuple[int, ...] = (8, 16, 32)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width))) for w in self.base_widths)


class Classifier(Module):
    """Conv-BN-LeakyReLU blocks, each followed by 2x2 average pooling, then
    global average pooling and a linear head.

    Batch-norm layers sit in ``self.bn`` in depth order; that order is the
    layer index used by moment targets.
    """

    def __init__(self, cfg: ClassifierConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        if cfg.input_size not in (16, 32):
            raise ConfigError(f"input_size must be 16 or 32, got {cfg.input_size}")
        if cfg.num_classes < 2:
            raise ConfigError("a classifier needs at least two classes")
        self.cfg = cfg
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.params = {}
        self.bn = []
        c_in = cfg.channels
        for i, c_out in enumerate(cfg.widths):
            self.params[f"conv{i}/w"] = _he(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
            self.params[f"conv{i}/b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
            self.bn.append(BatchNormState.create(c_out, dtype))
            c_in = c_out
        self.params["fc/w"] = _he(rng, (c_in, cfg.num_classes), c_in, dtype)
        self.params["fc/b"] = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.cfg.channels, self.cfg.input_size, self.cfg.input_size)

    def forward(self, x, mode: str = "eval", return_moments: bool = False):
        """Logits for a (B, C, H, W) batch.

        ``mode`` is passed to every batch-norm layer. With
        ``return_moments`` the per-layer batch (mean, variance) pairs are
        returned too, one per batch-norm layer.
        """
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise T.DimensionError(f"expected (B, {self.input_shape}), got {x.shape}")
        if mode == "train" and self.frozen:
            raise RuntimeError("a frozen model cannot run in train mode")
        if mode in ("train", "batch") and x.shape[0] < 2:
            raise T.DegenerateBatchError("batch-statistics modes need at least two images")
        moments = []
        h = x
        for i, state in enumerate(self.bn):
            h = T.conv2d(h, self.params[f"conv{i}/w"], self.params[f"conv{i}/b"], padding=1)
            h, m = T.batchnorm_forward(h, state, mode)
            moments.append(m)
            h = T.avg_pool2x(T.leaky_relu(h))
        h = T.global_avg_pool(h)
        logits = T.linear(h, self.params["fc/w"], self.params["fc/b"])
        if return_moments:
            return logits, moments
        return logits

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Eval-mode argmax labels."""
        out = []
        for start in range(0, len(images), batch_size):
            out.append(self.forward(images[start:start + batch_size]).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build_classifier(width: float = 1.0, num_classes: int = 10, channels: int = 1,
                     input_size: int = 16, seed: int = 0, dtype=T.DEFAULT_DTYPE,
                     base_widths: Sequence[int] = (8, 16, 32)) -> Classifier:
    cfg = ClassifierConfig(num_classes=num_classes, channels=channels, input_size=input_size,
                           width=width, base_widths=tuple(base_widths))
    return Classifier(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 1024
    num_classes: int = 10
    channels: int = 3
    target_size: int = 32
    base_size: Optional[int] = None
    # widths of the base feature map followed by one entry per upsample block
    widths: tuple[int, ...] = (128, 128, 64)

    def resolved_base(self) -> int:
        n_blocks = len(self.widths) - 1
        if self.base_size is not None:
            base = self.base_size
        else:
            base, rem = divmod(self.target_size, 2 ** n_blocks)
            if rem:
                raise ConfigError(f"target size {self.target_size} is not divisible by 2^{n_blocks}")
        if base * 2 ** n_blocks != self.target_size:
            raise ConfigError(
                f"base {base} x 2^{n_blocks} upsample blocks != target {self.target_size}")
        if base < 1:
            raise ConfigError("base size must be positive")
        return base

    def to_dict(self) -> dict:
        return asdict(self)


class Generator(Module):
    """Label-conditioned image generator.

    Linear(latent + K) -> reshape -> BN -> LeakyReLU, then per block
    Upsample x2 -> 3x3 conv -> BN -> LeakyReLU, then a 3x3 conv to the output
    channels and tanh.
    """

    def __init__(self, cfg: GeneratorConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        if cfg.num_classes < 1:
            raise ConfigError("generator needs at least one conditioning class")
        self.cfg = cfg
        self.frozen = False
        self.base = cfg.resolved_base()
        rng = np.random.default_rng(seed)
        w0 = cfg.widths[0]
        d_in = cfg.latent_dim + cfg.num_classes
        self.params = {
            "fc/w": _he(rng, (d_in, w0 * self.base * self.base), d_in, dtype),
            "fc/b": Tensor(np.zeros(w0 * self.base * self.base, dtype=dtype), requires_grad=True),
        }
        self.bn = [BatchNormState.create(w0, dtype)]
        for i, (c_in, c_out) in enumerate(zip(cfg.widths[:-1], cfg.widths[1:])):
            self.params[f"conv{i}/w"] = _he(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
            self.params[f"conv{i}/b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
            self.bn.append(BatchNormState.create(c_out, dtype))
        c_last = cfg.widths[-1]
        self.params["out/w"] = _he(rng, (cfg.channels, c_last, 3, 3), c_last * 9, dtype)
        self.params["out/b"] = Tensor(np.zeros(cfg.channels, dtype=dtype), requires_grad=True)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    @property
    def conditioning_width(self) -> int:
        return self.params["fc/w"].shape[0]

    def conditioning(self, z, labels) -> Tensor:
        z = T.as_tensor(z, dtype=self.params["fc/w"].dtype)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise T.DimensionError(f"latent batch must be (B, {self.latent_dim}), got {z.shape}")
        if labels.shape != (z.shape[0],):
            raise T.DimensionError("one label per latent vector is required")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        onehot = Tensor(T.one_hot(labels, self.num_classes, dtype=z.dtype))
        return T.concat([z, onehot], axis=1)

    def forward(self, z, labels, mode: str = "train") -> Tensor:
        h = T.linear(self.conditioning(z, labels), self.params["fc/w"], self.params["fc/b"])
        h = T.reshape(h, (h.shape[0], self.cfg.widths[0], self.base, self.base))
        h, _ = T.batchnorm_forward(h, self.bn[0], mode)
        h = T.leaky_relu(h)
        for i in range(len(self.cfg.widths) - 1):
            h = T.upsample2x_nearest(h)
            h = T.conv2d(h, self.params[f"conv{i}/w"], self.params[f"conv{i}/b"], padding=1)
            h, _ = T.batchnorm_forward(h, self.bn[i + 1], mode)
            h = T.leaky_relu(h)
        h = T.conv2d(h, self.params["out/w"], self.params["out/b"], padding=1)
        return T.tanh(h)

    __call__ = forward


def build_generator(latent_dim: int = 1024, num_classes: int = 10, channels: int = 3,
                    target_size: int = 32, seed: int = 0,
                    widths: Sequence[int] = (128, 128, 64),
                    base_size: Optional[int] = None, dtype=T.DEFAULT_DTYPE) -> Generator:
    cfg = GeneratorConfig(latent_dim=latent_dim, num_classes=num_classes, channels=channels,
                          target_size=target_size, base_size=base_size, widths=tuple(widths))
    return Generator(cfg, seed=seed, dtype=dtype)


def imagenet_generator_config(num_classes: int = 1) -> GeneratorConfig:
    """Full-resolution layout: 7x7x64 base, five upsample blocks, 512-d latent."""
    return GeneratorConfig(latent_dim=512, num_classes=num_classes, channels=3,
                           target_size=224, base_size=7, widths=(64,) * 6)


@dataclass
class LatentSpec:
    dim: int

    def sample(self, n: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
        return rng.standard_normal((n, self.dim)).astype(dtype)


@dataclass
class LabelPrior:
    """Uniform distribution over the classes one generator serves."""

    classes: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        if not self.classes:
            raise ValueError("label prior needs at least one class")

    def sample_local(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Indices into ``classes`` (the generator's conditioning labels)."""
        if len(self.classes) == 1:
            return np.zeros(n, dtype=np.int64)
        return rng.integers(0, len(self.classes), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.classes, dtype=np.int64)[self.sample_local(n, rng)]
