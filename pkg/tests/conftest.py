import os
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("BCAPS_MNIST_DIR", "/root/data/mnist"))


def have_mnist() -> bool:
    return MNIST_DIR.is_dir() and any(MNIST_DIR.glob("train-images*"))


# filled by test_acceptance.report, printed once at the end of the run
ACCEPTANCE_LINES: list[tuple[int, str]] = []

needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist_train():
    from bcaps.dataio import load_dataset
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return load_dataset(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    from bcaps.dataio import load_dataset
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return load_dataset(MNIST_DIR, "test")


@pytest.fixture
def blobs():
    """64 tiny 12-pixel images drawn around four prototypes, with labels."""
    rng = np.random.default_rng(0)
    protos = rng.uniform(0, 1, (4, 12))
    labels = np.repeat(np.arange(4), 16)
    images = np.clip(protos[labels] + rng.normal(0, 0.05, (64, 12)), 0, 1)
    return images, labels


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
