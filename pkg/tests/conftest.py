import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuronsim.idx import MnistDataset  # noqa: E402

MNIST_DIR = Path(os.environ.get("NEURONSIM_DATA_DIR", "/root/data/mnist"))
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_available():
    return all((MNIST_DIR / f).is_file() for f in MNIST_FILES)


@pytest.fixture(scope="session")
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set NEURONSIM_DATA_DIR)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    train = MnistDataset.load(mnist_dir / MNIST_FILES[0], mnist_dir / MNIST_FILES[1])
    test = MnistDataset.load(mnist_dir / MNIST_FILES[2], mnist_dir / MNIST_FILES[3])
    return train, test


def make_blobs(n, n_features=8, n_classes=3, seed=0):
    """Small separable classification set with MNIST-like [0, 1] features."""
    centers = np.random.default_rng(12345).random((n_classes, n_features))
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    images = np.clip(centers[labels] + 0.08 * rng.standard_normal((n, n_features)), 0.0, 1.0)
    return MnistDataset(images, labels)


@pytest.fixture
def blobs():
    return make_blobs(240, seed=1), make_blobs(90, seed=2)


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance line; returns ``passed`` so tests can assert on it."""
    def record(criterion, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
