"""GDFD binary checkpoints and model (de)serialisation.

Layout (all integers little-endian)::

    b"GDFD"  u32 version
    u32 n_meta   then n_meta x (u32 len, utf8 key, u32 len, utf8 value)
    u32 n_tensor then n_tensor x (u32 len, utf8 name, u8 dtype, u8 rank,
                                  rank x u64 dim, payload)

dtype codes: 0 = float32, 1 = float64, 2 = int64.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"GDFD"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


def encode(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    metadata = dict(metadata or {})
    names = list(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(metadata))]
    for key, value in metadata.items():
        for text in (str(key), str(value)):
            raw = text.encode("utf-8")
            out += [struct.pack("<I", len(raw)), raw]
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<BB", code, arr.ndim)]
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a GDFD checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    metadata = {}
    for _ in range(r.u32()):
        key = r.text()
        metadata[key] = r.text()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.text()
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        dtype = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, metadata


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: str,
                    metadata: Mapping[str, str] | None = None) -> None:
    data = encode(tensors, metadata)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


# ---------------------------------------------------------------- models and moments


def save_model(model, path: str, extra: Mapping[str, str] | None = None) -> None:
    from .models import Classifier

    kind = "classifier" if isinstance(model, Classifier) else "generator"
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(model.cfg).items()}
    meta = {"kind": kind, "config": json.dumps(cfg, sort_keys=True),
            "dtype": str(model.params[next(iter(model.params))].dtype)}
    meta.update(extra or {})
    save_checkpoint(model.state_dict(), path, meta)


def load_model(path: str):
    """Rebuild a classifier or generator from :func:`save_model` output."""
    from .models import Classifier, ClassifierConfig, Generator, GeneratorConfig

    arrays, meta = load_checkpoint(path)
    cfg = json.loads(meta["config"])
    for key in ("base_widths", "widths"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    dtype = np.dtype(meta.get("dtype", "float32"))
    if meta.get("kind") == "classifier":
        model = Classifier(ClassifierConfig(**cfg), dtype=dtype)
    elif meta.get("kind") == "generator":
        model = Generator(GeneratorConfig(**cfg), dtype=dtype)
    else:
        raise CheckpointError(f"{path}: not a model checkpoint")
    model.load_state_dict(arrays)
    return model


def moments_to_arrays(targets) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    arrays = {}
    for i, (m, v) in enumerate(targets.layers):
        arrays[f"moments/{i}/mean"] = m
        arrays[f"moments/{i}/var"] = v
    meta = {"kind": "moments", "provenance": targets.provenance,
            "classes": ",".join(str(c) for c in targets.classes)}
    return arrays, meta


def save_moments(targets, path: str) -> None:
    arrays, meta = moments_to_arrays(targets)
    save_checkpoint(arrays, path, meta)


def load_moments(path: str):
    from .losses import MomentTargets

    arrays, meta = load_checkpoint(path)
    n = len([k for k in arrays if k.endswith("/mean")])
    layers = [(arrays[f"moments/{i}/mean"], arrays[f"moments/{i}/var"]) for i in range(n)]
    classes = tuple(int(c) for c in meta.get("classes", "").split(",") if c)
    return MomentTargets(layers, meta["provenance"], classes)


# ---------------------------------------------------------------- ensembles


def save_ensemble(ensemble, directory: str) -> str:
    """One checkpoint per member plus ``ensemble.json``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    members = []
    for g, member in enumerate(ensemble.members):
        fname = f"generator_{g:04d}.gdfd"
        save_model(member.generator, os.path.join(directory, fname))
        mname = f"moments_{g:04d}.gdfd"
        save_moments(member.targets, os.path.join(directory, mname))
        members.append({"file": fname, "moments": mname, "classes": list(member.classes)})
    manifest = {"format": "gdfd-ensemble", "version": 1,
                "latent_dim": ensemble.latent.dim, "members": members}
    path = os.path.join(directory, "ensemble.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_ensemble(manifest_path: str):
    from .generators import EnsembleHandle, EnsembleMember
    from .models import LatentSpec
    from .stats import ClassAssignment

    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "gdfd-ensemble":
        raise CheckpointError(f"{manifest_path}: not an ensemble manifest")
    root = os.path.dirname(manifest_path)
    members = []
    for entry in manifest["members"]:
        gen = load_model(os.path.join(root, entry["file"]))
        targets = load_moments(os.path.join(root, entry["moments"]))
        members.append(EnsembleMember(gen, tuple(entry["classes"]), targets))
    assignment = ClassAssignment(tuple(m.classes for m in members))
    return EnsembleHandle(members, assignment, LatentSpec(int(manifest["latent_dim"])))
