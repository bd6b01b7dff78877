import sys

import numpy as np
import pytest

from tgimon.signal import TrsConfig, make_grid


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Replay the acceptance gate's per-criterion lines, which default
    # fd-level capture would otherwise hide on green runs.
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid():
    return make_grid(4.0, 0.01)


@pytest.fixture(scope="session")
def coarse_grid():
    return make_grid(4.0, 0.08)


@pytest.fixture(scope="session")
def trs_bins():
    return TrsConfig(mode="uniform_bins", coherence_time_ps=80.0,
                     mean_intensity=1.0)


@pytest.fixture(scope="session")
def trs_filtered():
    return TrsConfig(mode="filtered_gaussian", coherence_time_ps=80.0,
                     mean_intensity=1.0)


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)
