import numpy as np
import pytest

from mvscale.model import CoefficientSet, LinearModelParams, linear_model


@pytest.fixture
def params():
    return LinearModelParams()


@pytest.fixture
def linear():
    return linear_model()


def scalar_model(b=None, sigma=0.0, f=None, g=0.0, bbar=None, name="custom"):
    """One-dimensional coefficient set from scalar lambdas of (x, mean, y)."""
    b = b or (lambda x, m, y: 0.0 * x)
    f = f or (lambda x, m, y: 0.0 * y)

    def B(x, mu, y):
        return b(x, mu.mean(), y) + 0.0 * x

    def S(x, mu):
        return np.full((x.shape[0], 1, 1), float(sigma))

    def F(x, mu, y):
        return f(x, mu.mean(), y) + 0.0 * y

    def G(x, mu, y):
        val = g(y) if callable(g) else np.full(y.shape, float(g))
        return np.asarray(val, dtype=float).reshape(-1, 1, 1) + np.zeros((y.shape[0], 1, 1))

    Bbar = None if bbar is None else (lambda x, mu: bbar(x, mu.mean()) + 0.0 * x)
    return CoefficientSet((1, 1, 1, 1), B, S, F, G, bbar=Bbar, name=name)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
