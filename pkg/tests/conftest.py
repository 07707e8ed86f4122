import numpy as np
import pytest

from fxslv.marketdata import DiscountCurve
from fxslv.synthetic import flat_market, ssvi_market


@pytest.fixture(scope="session")
def flat20():
    return flat_market(vol=0.2, horizon=2.0)


@pytest.fixture(scope="session")
def smiled():
    return ssvi_market(horizon=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def flat_curve(rate, horizon=30.0):
    return DiscountCurve.flat(rate, horizon)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line and assert on it."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
