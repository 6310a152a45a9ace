"""Datasets, IDX reading and PGM/PPM image export."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

NUM_ARCHETYPES = 10
ARCHETYPES = ("hbar", "vbar", "plus", "x", "ring", "disk", "checker", "ramp", "box", "blob")


class DataFormatError(ValueError):
    """A file does not follow the expected binary layout."""


class MagicNumberError(DataFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [-1, 1]
    labels: np.ndarray  # (N,)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise ValueError("image values must lie in [-1, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def of_class(self, class_id: int) -> np.ndarray:
        return self.images[self.labels == class_id]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------- procedural toy set


def _render(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One archetype as a [0, 1] intensity map with random pose."""
    grid = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    s = rng.uniform(0.8, 1.2)
    x, y = (xx - cx) / s, (yy - cy) / s
    w = 0.22
    name = ARCHETYPES[kind]
    if name == "hbar":
        img = np.abs(y) < w
    elif name == "vbar":
        img = np.abs(x) < w
    elif name == "plus":
        img = ((np.abs(x) < w * 0.7) | (np.abs(y) < w * 0.7)) & (np.maximum(np.abs(x), np.abs(y)) < 0.75)
    elif name == "x":
        img = ((np.abs(x - y) < w) | (np.abs(x + y) < w)) & (np.maximum(np.abs(x), np.abs(y)) < 0.75)
    elif name == "ring":
        r = np.hypot(x, y)
        img = np.abs(r - 0.55) < 0.15
    elif name == "disk":
        img = np.hypot(x, y) < 0.45
    elif name == "checker":
        f = np.pi * rng.uniform(2.2, 2.8)
        img = np.sin(f * xx + rng.uniform(0, 6.3)) * np.sin(f * yy + rng.uniform(0, 6.3)) > 0
    elif name == "ramp":
        angle = rng.uniform(-0.4, 0.4)
        img = np.clip(0.5 + 0.5 * (np.cos(angle) * xx + np.sin(angle) * yy), 0, 1)
    elif name == "box":
        m = np.maximum(np.abs(x), np.abs(y))
        img = np.abs(m - 0.55) < 0.13
    else:  # blob in one corner
        corner = rng.integers(4)
        bx = 0.5 if corner & 1 else -0.5
        by = 0.5 if corner & 2 else -0.5
        img = np.exp(-((xx - bx - cx * 0.5) ** 2 + (yy - by - cy * 0.5) ** 2) / (2 * (0.25 * s) ** 2))
    return np.asarray(img, dtype=np.float64)


def render_toy_images(labels: np.ndarray, size: int, channels: int,
                      rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
    out = np.empty((len(labels), channels, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        base = _render(int(label), size, rng)
        intensity = rng.uniform(0.7, 1.0)
        for c in range(channels):
            tint = 1.0 if channels == 1 else rng.uniform(0.6, 1.0)
            img = -1 + 2 * intensity * tint * base
            img = img + rng.normal(0, noise, size=img.shape)
            out[i, c] = np.clip(img, -1, 1)
    return out


def gen_toy_dataset(seed: int = 0, n_train: int = 5000, n_test: int = 1000,
                    num_classes: int = 10, size: int = 16,
                    channels: int = 1) -> tuple[Dataset, Dataset]:
    """Procedural geometric-archetype classification set (train, test).

    Classes are balanced to within one image; the same seed always gives
    the same arrays.
    """
    if num_classes > NUM_ARCHETYPES:
        raise ValueError(f"only {NUM_ARCHETYPES} archetypes exist, asked for {num_classes}")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    ss = np.random.SeedSequence(seed)
    out = []
    for split, n, child in zip(("train", "test"), (n_train, n_test), ss.spawn(2)):
        rng = np.random.default_rng(child)
        labels = rng.permutation(np.arange(n) % num_classes)
        images = render_toy_images(labels, size, channels, rng)
        out.append(Dataset(images, labels, num_classes, split))
    return out[0], out[1]


# ---------------------------------------------------------------- IDX


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path: str, labels_path: str, num_classes: Optional[int] = None,
             split: str = "train") -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels map to x / 127.5 - 1."""
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise MagicNumberError(f"{images_path}: bad image magic 0x{magic:08x}")
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, "image header"))
        pixels = np.frombuffer(_read_exact(fh, n * rows * cols, "image payload"), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise MagicNumberError(f"{labels_path}: bad label magic 0x{magic:08x}")
        (n_labels,) = struct.unpack(">I", _read_exact(fh, 4, "label header"))
        labels = np.frombuffer(_read_exact(fh, n_labels, "label payload"), dtype=np.uint8)
    if n_labels != n:
        raise DataFormatError(f"{n} images but {n_labels} labels")
    images = (pixels.reshape(n, 1, rows, cols).astype(np.float32) / 127.5 - 1).astype(np.float32)
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1 if n else 1, 2)
    return Dataset(images, labels.astype(np.int64), k, split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: str) -> None:
    """Write uint8 arrays (N, H, W) and (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------- PGM / PPM


def to_bytes(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> uint8 via round-half-up of (x + 1) / 2 * 255, clamped."""
    scaled = (np.asarray(x, dtype=np.float64) + 1) / 2 * 255
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def write_image(image: np.ndarray, path: str, fmt: Optional[str] = None) -> None:
    """Write one (C, H, W) image as binary PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {image.shape}")
    C, H, W = image.shape
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".").lower() or ("pgm" if C == 1 else "ppm")
    if fmt == "pgm" and C != 1:
        raise ValueError(f"pgm needs 1 channel, got {C}")
    if fmt == "ppm" and C != 3:
        raise ValueError(f"ppm needs 3 channels, got {C}")
    if fmt not in ("pgm", "ppm"):
        raise ValueError(f"unknown image format {fmt!r}")
    magic = "P5" if fmt == "pgm" else "P6"
    payload = to_bytes(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{W} {H}\n255\n".encode("ascii"))
        fh.write(payload)


def read_image(path: str) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`write_image` back into [-1, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataFormatError(f"{path}: unsupported header {magic!r} maxval {maxval}")
    C = 1 if magic == b"P5" else 3
    data = raw[pos:pos + w * h * C]
    if len(data) != w * h * C:
        raise DataFormatError(f"{path}: truncated payload")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, C).transpose(2, 0, 1)
    return arr.astype(np.float32) / 127.5 - 1


def image_grid(images: np.ndarray, ncols: Optional[int] = None, pad: int = 1) -> np.ndarray:
    """Tile (N, C, H, W) images into one (C, H', W') canvas with -1 padding."""
    images = np.asarray(images)
    n, C, H, W = images.shape
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    canvas = -np.ones((C, nrows * (H + pad) + pad, ncols * (W + pad) + pad), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, ncols)
        y, x = pad + r * (H + pad), pad + c * (W + pad)
        canvas[:, y:y + H, x:x + W] = images[i]
    return canvas
