import numpy as np
import pytest

from dualmhe.model import batch_reactor


@pytest.fixture(scope="session")
def reactor():
    return batch_reactor()


def simulate(model, T, rng, x0=None, noise=True):
    """Plant trajectory and measurements y_0..y_T."""
    d, q = model.d, model.q
    x = np.array(model.prior_mean if x0 is None else x0, dtype=float)
    xs, ys = [], []
    for _ in range(T + 1):
        xs.append(x.copy())
        v = rng.multivariate_normal(np.zeros(q), model.R) if noise else np.zeros(q)
        ys.append(model.C @ x + v)
        w = rng.multivariate_normal(np.zeros(d), model.Q) if noise else np.zeros(d)
        x = model.A @ x + w
    return np.array(xs), np.array(ys)


@pytest.fixture(scope="session")
def reactor_data(reactor):
    model, _ = reactor
    rng = np.random.default_rng(7)
    x0 = rng.multivariate_normal(model.prior_mean, model.prior_cov)
    return simulate(model, 50, rng, x0=x0)


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
