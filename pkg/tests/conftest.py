"""Shared fixtures: the acceptance summary recorder and an image-batch
fabricator used when no real CIFAR-10 directory is supplied.

Set CIFAR10_DIR to a directory of CIFAR-10 binary batches to run the
training acceptance checks on the real dataset instead.
"""

import os

import numpy as np
import pytest

from cacconv.data import _bilinear_matrix, write_cifar10_batch

_acceptance_lines = []


class AcceptanceRecorder:
    """Collects one pass/fail line per acceptance check for the
    end-of-run summary block."""

    def record(self, num: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[acceptance {num}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
        _acceptance_lines.append((num, line))
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.write_sep("=", "acceptance summary")
    for _, line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)


def fabricate_cifar10_dir(dir_path, n_train=5000, n_test=1000, seed=0):
    """Write a ten-class stand-in dataset in the CIFAR-10 binary layout.

    Each class is a distinct mean color; images are smooth bilinear
    blobs over that color plus mild pixel noise, so the classes are
    separable by channel statistics alone (they survive aggregated
    1 x 1 routing) while every window keeps nonzero gradient energy.
    """
    levels = (60, 128, 196)
    combos = [(r, g, b) for r in levels for g in levels for b in levels]
    picks = (0, 4, 8, 10, 13, 16, 18, 21, 24, 26)
    palette = np.array([combos[i] for i in picks], dtype=np.float64)
    upsample = _bilinear_matrix(32, 4)
    rng = np.random.default_rng(seed)

    def make(n):
        labels = rng.integers(0, 10, size=n).astype(np.int64)
        coarse = rng.normal(0.0, 1.0, (n, 3, 4, 4))
        blob = np.einsum("ij,ncjk,lk->ncil", upsample, coarse, upsample) * 24.0
        noise = rng.normal(0.0, 6.0, (n, 3, 32, 32))
        img = palette[labels][:, :, None, None] + blob + noise
        return np.clip(img, 0, 255).astype(np.uint8), labels

    images, labels = make(n_train)
    write_cifar10_batch(os.path.join(dir_path, "data_batch_1.bin"), images, labels)
    images, labels = make(n_test)
    write_cifar10_batch(os.path.join(dir_path, "test_batch.bin"), images, labels)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    override = os.environ.get("CIFAR10_DIR")
    if override:
        return override
    d = tmp_path_factory.mktemp("fab_cifar")
    fabricate_cifar10_dir(str(d))
    return str(d)
