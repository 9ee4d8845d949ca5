import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sketchgan.data import generate_toy_dataset  # noqa: E402
from sketchgan.extractors import load_pretrained  # noqa: E402
from sketchgan.trainer import TrainConfig  # noqa: E402

torch.set_num_threads(1)

GOLDEN = Path(__file__).parent / "golden"

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def extractors():
    return load_pretrained(train_if_missing=False)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """The standard 50 x 4 toy set at 64x64, seed 7."""
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(50, 4, (64, 64), 7, root)
    return root


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate_toy_dataset(6, 2, (32, 32), 3, root, test_fraction=0.34)
    return root


@pytest.fixture
def tiny_config():
    """Small networks and a two-stage 16 -> 32 schedule; a step takes well under a second."""
    return TrainConfig(
        batch_size=4,
        widths=(8, 16),
        fade_schedule=((16, 3), (32, 4)),
        base_lr=1e-3,
        checkpoint_every=2,
        seed=5,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
