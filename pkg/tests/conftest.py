import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdcontrol.coeff import DiffusionCoefficient
from sdcontrol.spacegrid import assemble, default_grid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[0.5, 1.5], ids=["wd", "sd"])
def degenerate_op(request):
    a = DiffusionCoefficient.power_law(request.param)
    return assemble(a, default_grid(a, 40))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
