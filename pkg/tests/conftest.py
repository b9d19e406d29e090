import numpy as np
import pytest

from oftkit import adapter as adp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_adapter(rng, d, n, r, mode="oft", shared=False, scale=0.3, eps_prime=None):
    if mode == "coft" and eps_prime is None:
        eps_prime = 1.0
    a = adp.Adapter.fresh(d, n, r, mode, shared, eps_prime)
    return a.with_params(rng.normal(0.0, scale, a.num_params))


def random_skew(rng, b, scale=1.0):
    q = rng.normal(0.0, scale, (b, b))
    return np.triu(q, 1) - np.triu(q, 1).T


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
