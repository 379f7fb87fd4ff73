from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aniso import datagen

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def record_criterion(request):
    """Report one acceptance criterion: prints its line now and again in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[_CRITERIA][number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])


def write_fake_cifar(directory, seed: int = 0) -> None:
    """Six well-formed batch files: each class appears 1,000 times per file, pixels are random bytes."""
    gen = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for name in (*datagen.CIFAR_TRAIN_FILES, datagen.CIFAR_TEST_FILE):
        records = gen.integers(0, 256, size=(datagen.CIFAR_RECORDS_PER_FILE, datagen.CIFAR_RECORD), dtype=np.uint8)
        records[:, 0] = gen.permutation(np.arange(datagen.CIFAR_RECORDS_PER_FILE) % 10)
        (directory / name).write_bytes(records.tobytes())


@pytest.fixture(scope="session")
def fake_cifar_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin"
    write_fake_cifar(directory)
    return directory
