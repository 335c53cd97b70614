import numpy as np
import pytest
import torch

from sparsebody import dataio
from sparsebody import skeleton as sk


@pytest.fixture(scope="session")
def skeleton():
    return sk.default_skeleton()


@pytest.fixture(scope="session")
def small_dataset():
    return dataio.synth_dataset(np.random.default_rng(7), 3, n_frames=60)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
