import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_simplex(rng, shape, axis=0):
    x = rng.random(shape) + 1e-3
    return x / x.sum(axis=axis, keepdims=True)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    from synalign.toydata import make_toy_data

    return make_toy_data(tmp_path_factory.mktemp("toy") / "data", n_images=40, shift=0.3, seed=3)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
