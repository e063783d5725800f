import numpy as np
import pytest

from lcmi.moments import NormalModel


def random_sigma(rng, k, unit_diag=True):
    a = rng.normal(size=(k, k + 2))
    s = a @ a.T / (k + 2)
    if unit_diag:
        d = np.sqrt(np.diag(s))
        s = s / np.outer(d, d)
    return 0.5 * (s + s.T)


def random_model(rng, k, p, mean=0.0, unit_diag=True):
    sigma = random_sigma(rng, k, unit_diag)
    x = rng.normal(size=(k, p))
    y = mean + np.linalg.cholesky(sigma + 1e-12 * np.eye(k)) @ rng.normal(size=k)
    return NormalModel(y, x, sigma)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(RESULTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
        terminalreporter.write_line(line)
