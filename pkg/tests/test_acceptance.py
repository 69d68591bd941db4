"""The acceptance gate: every exit criterion at its stated tolerance.

Each test prints its one-line verdict (run pytest -s to stream them) and
asserts the criterion outcome. Heavy solves, ensembles and calibrations are
shared through a session-scoped context, which is sound because the solver
is bit-deterministic across runs and thread counts (criterion 10 checks
exactly that).

Expected wall time on two cores is roughly an hour; the bequest
calibrations dominate (each bisection trial re-solves the recursion).
"""

import pytest

from habitdp.acceptance import (
    AcceptanceContext,
    criterion_1_merton_oracle,
    criterion_2_no_bankruptcy,
    criterion_3_habit_start_ordering,
    criterion_4_weight_dominance_trend,
    criterion_5_consumption_peak,
    criterion_6_sensitivity_smoothing,
    criterion_7_wealth_curve_linearity,
    criterion_8_bequest_calibration,
    criterion_9_numerical_hygiene,
    criterion_10_determinism,
)


@pytest.fixture(scope="session")
def ctx():
    return AcceptanceContext()


def _run(fn, ctx):
    result = fn(ctx)
    print(result.line())
    assert result.passed, result.line()


def test_criterion_01_merton_oracle(ctx):
    _run(criterion_1_merton_oracle, ctx)


def test_criterion_02_no_bankruptcy(ctx):
    _run(criterion_2_no_bankruptcy, ctx)


def test_criterion_03_habit_start_ordering(ctx):
    _run(criterion_3_habit_start_ordering, ctx)


def test_criterion_04_weight_dominance_trend(ctx):
    _run(criterion_4_weight_dominance_trend, ctx)


def test_criterion_05_consumption_peak(ctx):
    _run(criterion_5_consumption_peak, ctx)


def test_criterion_06_sensitivity_smoothing(ctx):
    _run(criterion_6_sensitivity_smoothing, ctx)


def test_criterion_07_wealth_curve_linearity(ctx):
    _run(criterion_7_wealth_curve_linearity, ctx)


def test_criterion_08_bequest_calibration(ctx):
    _run(criterion_8_bequest_calibration, ctx)


def test_criterion_09_numerical_hygiene(ctx):
    _run(criterion_9_numerical_hygiene, ctx)


def test_criterion_10_determinism(ctx):
    _run(criterion_10_determinism, ctx)


def test_property_intertemporal_wealth_ordering(ctx):
    """Stronger habit leaves the investor wealthier through mid-horizon."""
    import numpy as np

    n = 100
    mid = slice(n // 4, 3 * n // 4)
    for rho in (0.10, 0.0):
        w_strong = ctx.stats(1.0, rho).mean_wealth[mid]
        w_none = ctx.stats(0.0, rho).mean_wealth[mid]
        assert np.all(w_strong >= w_none), f"ordering broken at rho={rho}"
