import numpy as np
import pytest

from tabkit.dataset import LabeledDataset


def blob_dataset(n=120, seed=0, num_classes=2, shape=(1, 4, 4), spread=0.3, split="train",
                 with_groups=True):
    """Linearly separable Gaussian blobs, one group per class."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    centers = rng.normal(0, 1, (num_classes,) + shape).astype(np.float32)
    x = centers[labels] + spread * rng.normal(0, 1, (n,) + shape).astype(np.float32)
    return LabeledDataset(x.astype(np.float32), labels, labels if with_groups else None,
                          num_classes, num_classes, split=split)


@pytest.fixture
def blobs():
    return blob_dataset()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
