import numpy as np
import pytest

from mkvfbsde.fbsde import ContinuationConfig, solve_mkv_fbsde
from mkvfbsde.maxprinciple import TimeGrid
from mkvfbsde.model import lq_benchmark


@pytest.fixture(scope="session")
def lq():
    return lq_benchmark()


@pytest.fixture(scope="session")
def small_lq(lq):
    """A quick coupled LQ solve shared by several modules' tests."""
    grid = TimeGrid(1.0, 20)
    sol = solve_mkv_fbsde(lq, grid, 600, ContinuationConfig(delta0=0.5), seed=3)
    return lq, grid, sol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """record(k, ok, detail, elapsed, limit): log one acceptance line, then
    fail the test if the criterion or its runtime budget is missed."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def _record(k, ok, detail, elapsed, limit):
        in_time = elapsed < limit
        status = "PASS" if ok and in_time else "FAIL"
        line = f"criterion {k:>2}: {status}  {detail}  [{elapsed:.1f} s / {limit:g} s]"
        lines.append((k, line))
        print(line)
        assert ok, line
        assert in_time, line

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
