import numpy as np
import pytest
import torch

from ila_da.data import DigitDataset


def make_digits(n_per_class: int, side: int = 28, channels: int = 1, num_classes: int = 10,
                seed: int = 0, name: str = "synth", shift: float = 0.0) -> DigitDataset:
    """Tiny learnable digit-like set: each class lights a different block of pixels."""
    gen = torch.Generator().manual_seed(seed)
    labels = torch.arange(num_classes).repeat_interleave(n_per_class)
    images = 0.1 * torch.rand(len(labels), channels, side, side, generator=gen)
    block = side // 4
    for c in range(num_classes):
        r, col = divmod(c, 4)
        sel = labels == c
        images[sel, :, r * block:(r + 1) * block, col * block:(col + 1) * block] += 0.8
    images = (images + shift).clamp(0, 1)
    images = (images - 0.5) / 0.5
    perm = torch.randperm(len(labels), generator=gen)
    return DigitDataset(images[perm], labels[perm], name, "train")


@pytest.fixture
def synth_pair():
    source = make_digits(30, seed=1, name="src")
    target = make_digits(24, seed=2, name="tgt", shift=0.1)
    return source, target


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
