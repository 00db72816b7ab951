import numpy as np
import pytest

from ifepanel.estimator import fit_ife
from ifepanel.families import Probit
from ifepanel.panel import Panel, drop_uninformative
from ifepanel.simulation import DgpSpec, dgp_generate

# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_panel(rng, N, T, K, family="linear", beta=None, effects=None):
    """Panel drawn from an interactive-effects index model."""
    x = rng.standard_normal((N, T, K))
    beta = np.ones(K) if beta is None else np.asarray(beta, dtype=float)
    if effects is None:
        a = rng.uniform(0.5, 1.5, N) * rng.choice([-1, 1], N)
        g = rng.uniform(0.5, 1.5, T)
    else:
        a, g = effects
    z = x @ beta + np.outer(a, g)
    if family == "linear":
        y = z + rng.standard_normal((N, T))
    elif family == "probit":
        y = (z >= rng.standard_normal((N, T))).astype(float)
    elif family == "logit":
        y = (rng.uniform(size=(N, T)) < 1 / (1 + np.exp(-z))).astype(float)
    elif family == "poisson":
        y = rng.poisson(np.exp(np.clip(z, -20, 5))).astype(float)
    else:
        raise ValueError(family)
    return Panel(y, x)


def probit_fit(rng, N=15, T=12, K=2):
    """First converged probit fit from the static simulation design (strong positive effects)."""
    beta0 = (1.0, -0.5)[:K]
    for rep in range(60):
        p, _ = dgp_generate(DgpSpec("probit_static", N, T, beta0=beta0, seed=int(rng.integers(1 << 30))), rep)
        try:
            p = drop_uninformative(p).panel
        except ValueError:
            continue
        fit = fit_ife(p, Probit())
        if fit.converged:
            return p, fit
    raise AssertionError("no converged probit fit")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
