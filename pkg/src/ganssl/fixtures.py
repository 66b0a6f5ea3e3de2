"""Small dataset files in the published binary layouts, for smoke runs and tests.

The images are random bytes; only the file formats, shapes and label ranges
match the real releases.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .datasets import write_cifar_batch, write_idx

# (train incl. validation, test) record counts per fixture
FIXTURE_COUNTS = {"mnist": (240, 100), "svhn": (240, 100), "cifar10": (250, 100)}


def fixture_split_sizes(name: str) -> tuple[int, int, int]:
    """split_sizes override matching the fixture files (no validation records)."""
    n_train, n_test = FIXTURE_COUNTS[name]
    return n_train, 0, n_test


def _labels(rng, n):
    # every class present, then random
    return np.concatenate([np.arange(10), rng.integers(0, 10, n - 10)]).astype(np.uint8)


def write_mnist_fixture(root, seed: int = 0, gz: bool = False) -> Path:
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    suffix = ".gz" if gz else ""
    for prefix, n in zip(("train", "t10k"), FIXTURE_COUNTS["mnist"]):
        write_idx(root / f"{prefix}-images-idx3-ubyte{suffix}", rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
        write_idx(root / f"{prefix}-labels-idx1-ubyte{suffix}", _labels(rng, n))
    return root


def write_cifar_fixture(root, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    root = Path(root) / "cifar-10-batches-bin"
    root.mkdir(parents=True, exist_ok=True)
    n_train, n_test = FIXTURE_COUNTS["cifar10"]
    per = n_train // 5
    for i in range(1, 6):
        write_cifar_batch(root / f"data_batch_{i}.bin", rng.integers(0, 256, (per, 32, 32, 3), dtype=np.uint8),
                          _labels(rng, per))
    write_cifar_batch(root / "test_batch.bin", rng.integers(0, 256, (n_test, 32, 32, 3), dtype=np.uint8),
                      _labels(rng, n_test))
    return root.parent


def write_svhn_fixture(root, seed: int = 0) -> Path:
    from scipy.io import savemat

    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, n in zip(("train", "test"), FIXTURE_COUNTS["svhn"]):
        labels = _labels(rng, n).astype(np.int64)
        labels[labels == 0] = 10  # published files label the digit 0 as 10
        savemat(root / f"{name}_32x32.mat",
                {"X": rng.integers(0, 256, (32, 32, 3, n), dtype=np.uint8), "y": labels[:, None]})
    return root


def write_fixture(name: str, root, seed: int = 0) -> Path:
    return {"mnist": write_mnist_fixture, "cifar10": write_cifar_fixture, "svhn": write_svhn_fixture}[name](root, seed)
