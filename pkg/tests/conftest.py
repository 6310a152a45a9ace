"""Shared fixtures.

Trained artifacts (teacher, ensembles) are cached on disk under the pytest
cache directory, keyed by a hash of the package sources and the run
settings, so a code change always invalidates them.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import pytest

import gdfd
from gdfd import checkpoint
from gdfd.config import parse_config
from gdfd.pipeline import make_data, train_teacher

SRC = Path(gdfd.__file__).parent


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class ArtifactCache:
    def __init__(self, root: Path):
        self.root = root
        self.digest = source_digest()

    def path(self, kind: str, **key) -> Path:
        tag = hashlib.sha256(json.dumps(key, sort_keys=True, default=str).encode()).hexdigest()[:12]
        p = self.root / self.digest / f"{kind}_{tag}"
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


@pytest.fixture(scope="session")
def cache(request) -> ArtifactCache:
    if os.environ.get("GDFD_TEST_CACHE"):
        root = Path(os.environ["GDFD_TEST_CACHE"])
    else:
        root = Path(request.config.cache.mkdir("gdfd_artifacts"))
    return ArtifactCache(root)


@pytest.fixture(scope="session")
def toy_cfg():
    return parse_config()


@pytest.fixture(scope="session")
def toy_data(toy_cfg):
    return make_data(toy_cfg)


@pytest.fixture(scope="session")
def toy_teacher(toy_cfg, toy_data, cache):
    """Full-budget toy teacher, seed 0, frozen."""
    train, test = toy_data
    return cached_model(cache, "teacher", lambda: train_teacher(toy_cfg, 0, train, test)[0],
                        seed=0).freeze()


def cached_model(cache: ArtifactCache, kind: str, build, **key):
    """Load a model checkpoint from the cache or build and store it."""
    path = cache.path(kind, **key)
    if path.exists():
        return checkpoint.load_model(str(path))
    model = build()
    tmp = path.with_suffix(".tmp")
    checkpoint.save_model(model, str(tmp))
    os.replace(tmp, path)
    return model


@pytest.fixture(scope="session")
def supervised_student(toy_cfg, toy_data, cache):
    from gdfd.pipeline import train_supervised_student
    train, test = toy_data
    return cached_model(cache, "supervised", lambda: train_supervised_student(toy_cfg, 0, train, test)[0],
                        seed=0)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: list[str] = []


def report(number: int, ok: bool, title: str, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"{'PASS' if ok else 'FAIL'} C{number:<2} {title}: {detail}"
    ACCEPTANCE.append(line)
    print("\n" + line, flush=True)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
