import math

import numpy as np
import pytest

from habitdp import (
    GROWTH_FLOOR,
    HabitState,
    MarketParams,
    Preferences,
    bequest,
    habit_update,
    utility,
    wealth_step,
)
from conftest import BASE_MKT, base_prefs


class TestUtility:
    def test_inherited_level_no_habit(self):
        p = base_prefs(beta=0.0)
        assert utility(p.c0, 123456.0, p) == pytest.approx(2.0, abs=1e-14)

    def test_zero_consumption_positive_gamma(self):
        assert utility(0.0, 5e4, base_prefs()) == 0.0

    def test_double_inherited_with_full_habit(self):
        p = base_prefs(beta=1.0)
        assert utility(2e5, 1e5, p) == pytest.approx(2.0, abs=1e-14)

    def test_ratio_four(self):
        p = base_prefs(beta=0.7)
        c_bar = 5e4
        c = 4.0 * (p.c0 + p.beta * c_bar)
        assert utility(c, c_bar, p) == pytest.approx(4.0, rel=1e-14)

    def test_zero_consumption_negative_gamma_is_domain_error(self):
        p = base_prefs(gamma=-1.0)
        with pytest.raises(ValueError):
            utility(0.0, 0.0, p)

    def test_monotone_in_consumption_decreasing_in_habit(self):
        p = base_prefs(beta=1.0)
        rng = np.random.default_rng(1)
        h = 1e-6 * p.c0
        for _ in range(100):
            c = rng.uniform(1e3, 1e6)
            cb = rng.uniform(0.0, 3e5)
            assert utility(c + h, cb, p) > utility(c, cb, p)
            assert utility(c, cb + h, p) < utility(c, cb, p)

    def test_concave_in_consumption(self):
        p = base_prefs(beta=0.5)
        rng = np.random.default_rng(2)
        for _ in range(100):
            c1, c2 = rng.uniform(1.0, 1e6, size=2)
            cb = rng.uniform(0.0, 3e5)
            mid = utility(0.5 * (c1 + c2), cb, p)
            chord = 0.5 * (utility(c1, cb, p) + utility(c2, cb, p))
            assert mid >= chord - 1e-12 * max(abs(mid), 1.0)

    def test_beta_zero_ignores_habit(self):
        p = base_prefs(beta=0.0)
        vals = {utility(2e5, cb, p) for cb in (0.0, 1e4, 1e5, 3e5)}
        assert len(vals) == 1

    def test_scale_covariance(self):
        for lam in (0.25, 3.0, 1e4):
            p1 = base_prefs(beta=0.8)
            p2 = base_prefs(beta=0.8, c0=lam * p1.c0, w0=lam * p1.w0)
            assert utility(lam * 2e5, lam * 1e5, p2) == utility(2e5, 1e5, p1)

    def test_custom_base_hook(self):
        p = base_prefs(beta=1.0)
        got = utility(2e5, 1e5, p, base=math.log)
        assert got == pytest.approx(math.log(1.0), abs=1e-15)


class TestBequest:
    def test_zero_weight(self):
        p = base_prefs(bequest_b=0.0)
        assert bequest(123.0, 456.0, p) == 0.0

    def test_unit_wealth_no_discount(self):
        p = base_prefs(rho=0.0, bequest_b=1.0)
        assert bequest(1.0, 0.0, p) == pytest.approx(2.0, abs=1e-14)

    def test_reported_weight_times_power_wealth(self):
        p = base_prefs(rho=0.0, bequest_b=0.39)
        assert bequest(1e6, 0.0, p) == pytest.approx(780.0, rel=1e-14)

    def test_habit_scaled_switch(self):
        p = base_prefs(rho=0.0, beta=1.0, bequest_b=1.0, bequest_habit_scaled=True)
        # wealth is divided by c0 + beta*c_bar before the power utility
        assert bequest(2e5, 1e5, p) == pytest.approx(2.0, abs=1e-14)

    def test_zero_wealth_negative_gamma(self):
        p = base_prefs(gamma=-0.5, bequest_b=1.0)
        with pytest.raises(ValueError):
            bequest(0.0, 0.0, p)


class TestHabitUpdate:
    def test_first_step_ignores_history(self):
        assert habit_update(999.0, 5.0, 1) == 5.0

    def test_second_step_average(self):
        assert habit_update(5.0, 7.0, 2) == 6.0

    def test_constant_consumption_fixed_point(self):
        cb = 0.0
        for i in range(1, 50):
            cb = habit_update(cb, 42.0, i)
            assert cb == pytest.approx(42.0, rel=1e-14)

    def test_telescopes_to_running_mean(self):
        rng = np.random.default_rng(3)
        cons = rng.uniform(0.0, 3e5, size=500)
        cb = 0.0
        for i, c in enumerate(cons, start=1):
            cb = habit_update(cb, float(c), i)
            mean = cons[:i].mean()
            assert abs(cb - mean) <= 1e-12 * max(mean, 1.0)

    def test_rejects_bad_index(self):
        with pytest.raises(ValueError):
            habit_update(0.0, 1.0, 0)


class TestWealthStep:
    def test_riskless_algebra(self):
        assert wealth_step(100.0, 10.0, 0.0, 0.3, 1.0, BASE_MKT) == pytest.approx(
            92.7, abs=1e-12
        )

    def test_full_consumption_zeroes_wealth(self):
        assert wealth_step(100.0, 1000.0, 0.7, 2.0, 0.1, BASE_MKT) == 0.0

    def test_risky_leg_arithmetic(self):
        got = wealth_step(100.0, 0.0, 1.0, 1.0, 0.1, BASE_MKT)
        assert got == pytest.approx(108.40569415042095, rel=1e-12)

    def test_overconsumption_rejected(self):
        with pytest.raises(ValueError):
            wealth_step(100.0, 1001.0, 0.5, 0.0, 0.1, BASE_MKT)

    def test_nonnegative_under_extreme_shock(self):
        # growth factor would be negative without the floor
        got = wealth_step(100.0, 0.0, 1.0, -50.0, 1.0, BASE_MKT)
        assert got == pytest.approx(100.0 * GROWTH_FLOOR)

    def test_nonnegative_property(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            w = rng.uniform(0.0, 1e6)
            dt = rng.uniform(0.01, 1.0)
            c = rng.uniform(0.0, w / dt)
            om = rng.uniform(0.0, 1.0)
            z = rng.normal() * 5
            assert wealth_step(w, c, om, z, dt, BASE_MKT) >= 0.0


class TestValidation:
    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError, match="market.sigma"):
            MarketParams(mu=0.05, sigma=-1.0, r=0.03)

    def test_zero_risk_premium_warns_not_raises(self):
        with pytest.warns(UserWarning, match="risk premium"):
            MarketParams(mu=0.03, sigma=0.25, r=0.03)

    @pytest.mark.parametrize(
        "field,value",
        [
            ("gamma", 0.0),
            ("gamma", 1.0),
            ("gamma", 1.5),
            ("c0", 0.0),
            ("beta", -0.1),
            ("bequest_b", -1.0),
            ("T", 0.0),
            ("w0", -5.0),
        ],
    )
    def test_preference_bounds(self, field, value):
        with pytest.raises(ValueError, match=f"preferences.{field}"):
            base_prefs(**{field: value})

    def test_habit_state_bounds(self):
        HabitState(c_bar=0.0, step_index=1)
        with pytest.raises(ValueError):
            HabitState(c_bar=-1.0, step_index=1)
        with pytest.raises(ValueError):
            HabitState(c_bar=0.0, step_index=0)
