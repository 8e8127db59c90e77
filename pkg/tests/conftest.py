import numpy as np
import pytest

from roboadvisor.engine import HmmBlForecaster
from roboadvisor.market_data import (build_calendar, equilibrium_weights, load_aum_table,
                                     load_price_table, to_returns)
from roboadvisor.synthetic import reference_paths


class ReferenceData:
    """Bundled dataset with the 56 x 22-day calendar and a shared HMM-BL forecaster."""

    def __init__(self):
        paths = reference_paths()
        self.paths = paths
        self.returns = to_returns(load_price_table(paths["prices"]))
        self.aum = equilibrium_weights(load_aum_table(paths["aum"]))
        self.index = load_price_table(paths["index"])
        self.calendar = build_calendar(1260, 22, 56, len(self.returns))
        self.forecaster = HmmBlForecaster(self.returns, self.aum, days_per_period=22)


@pytest.fixture(scope="session")
def ref():
    return ReferenceData()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> (passed, detail); echoed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE_KEY, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
