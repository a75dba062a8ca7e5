import math

import pytest
from scipy.optimize import brentq

from powmfg.core import ModelParams
from powmfg.det1d import default_grid, solve_master_1d


def root_oracle(p: ModelParams) -> float:
    """Independent stationary state: bracketed root of d K = lam (1/(K+eps) - c)/(r+d)."""

    def f(k):
        return p.delta * k - p.lam * (1.0 / (k + p.eps) - p.c) / (p.r + p.delta)

    lo = 0.0 if p.eps > 0 else 1e-300
    if f(lo) >= 0:
        return 0.0
    return brentq(f, lo, 1.0 / p.c, xtol=1e-15, rtol=1e-15)


@pytest.fixture(scope="session")
def baseline():
    return ModelParams()


@pytest.fixture(scope="session")
def baseline_solution(baseline):
    return solve_master_1d(baseline, default_grid(baseline))


@pytest.fixture(scope="session")
def k_star_oracle(baseline):
    return root_oracle(baseline)


def close(a, b, rel=0.0, abs_=0.0):
    return math.isclose(a, b, rel_tol=rel, abs_tol=abs_)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
