import numpy as np
import pytest

from srsmort.data import TabulatedDataset
from srsmort.modelspec import ModelSpec, VariancePrior, WalkSpec

# (criterion, passed, detail) lines collected by the acceptance tests
ACCEPTANCE_LINES = []


def record_acceptance(criterion, passed, detail):
    ACCEPTANCE_LINES.append((criterion, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {crit:>2}: {detail}")


def make_dataset(dims, rate=0.01, exposure=1000.0, seed=0):
    rng = np.random.default_rng(seed)
    R, A, T, C = dims
    N = np.full((R, A, T), float(exposure))
    y = rng.poisson(N[..., None] * rate, size=dims)
    return TabulatedDataset(deaths=y, exposure=N)


def tiny_spec(overdispersion="iid"):
    """Walks per (region, cause) over a single age group; no interactions."""
    return ModelSpec(
        fixed_terms=("intercept", "region", "cause"),
        walks=WalkSpec(by=("region", "cause"), age_groups=None, cause_groups=None),
        overdispersion=overdispersion,
        walk_prior=VariancePrior("pc", 1.0, 0.01),
        epsilon_prior=VariancePrior("pc", 5.0, 0.01),
    )


@pytest.fixture(scope="session")
def tiny_data():
    """2 regions x 1 age x 5 years x 2 causes with a trend and cause contrast."""
    rng = np.random.default_rng(20240611)
    R, A, T, C = 2, 1, 5, 2
    t = np.arange(T)
    eta = (-4.0 + 0.3 * np.arange(R)[:, None, None, None] + 0.5 * np.arange(C)[None, None, None, :]
           - 0.05 * t[None, None, :, None] + 0.1 * rng.standard_normal((R, A, T, C)))
    N = np.full((R, A, T), 2000.0)
    y = rng.poisson(N[..., None] * np.exp(eta))
    return TabulatedDataset(deaths=y, exposure=N)
