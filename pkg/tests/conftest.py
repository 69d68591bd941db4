import numpy as np
import pytest

from habitdp import GridSpec, MarketParams, Preferences, backward_solve

BASE_MKT = MarketParams(mu=0.05, sigma=0.25, r=0.03)


def small_spec(**kw) -> GridSpec:
    args = dict(
        n_steps=20,
        w_min=1e3,
        w_max=5e6,
        w_nodes=41,
        w_spacing="log",
        cbar_min=0.0,
        cbar_max=3e5,
        cbar_nodes=11,
        cbar_spacing="linear",
    )
    args.update(kw)
    return GridSpec(**args)


def base_prefs(**kw) -> Preferences:
    args = dict(
        gamma=0.5, rho=0.10, beta=0.1, c0=1e5, bequest_b=0.0, T=10.0, w0=1e6
    )
    args.update(kw)
    return Preferences(**args)


@pytest.fixture(scope="session")
def mkt():
    return BASE_MKT


@pytest.fixture(scope="session")
def small_solution():
    """One shared small-grid solve (no-habit) for the cheap dp/sim tests."""
    prefs = base_prefs(beta=0.0)
    spec = small_spec()
    vt, pt = backward_solve(spec, prefs, BASE_MKT, threads=1)
    return prefs, spec, vt, pt


@pytest.fixture(scope="session")
def small_habit_solution():
    prefs = base_prefs(beta=1.0)
    spec = small_spec()
    vt, pt = backward_solve(spec, prefs, BASE_MKT, threads=1)
    return prefs, spec, vt, pt


@pytest.fixture(scope="session")
def default_nohabit_solution():
    """Production-grid no-habit solve for the tolerances stated at it."""
    prefs = base_prefs(beta=0.0)
    spec = GridSpec.default_for(prefs)
    vt, pt = backward_solve(spec, prefs, BASE_MKT)
    return prefs, spec, vt, pt


def rand_state(seed=0):
    return np.random.default_rng(seed)
