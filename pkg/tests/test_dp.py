import math

import numpy as np
import pytest

from habitdp import (
    GridSpec,
    QuadratureRule,
    backward_solve,
    build_grids,
    check_value_monotone,
    expected_continuation,
    generic_backward_solve,
    interp2,
    merton_solve,
    optimize_node,
    policy_lookup,
)
from habitdp.dp import GridEscapeDiagnostics
from habitdp.model import crra
from conftest import BASE_MKT, base_prefs, small_spec


class TestQuadrature:
    @pytest.mark.parametrize("n", [3, 7, 15])
    def test_moments(self, n):
        rule = QuadratureRule.gauss_hermite(n)
        assert abs(rule.p.sum() - 1.0) <= 1e-12
        assert abs((rule.p * rule.z).sum()) <= 1e-12
        assert abs((rule.p * rule.z**2).sum() - 1.0) <= 1e-10

    def test_seven_node_support(self):
        rule = QuadratureRule.gauss_hermite(7)
        assert rule.z.max() == pytest.approx(3.7504, abs=1e-3)

    def test_polynomial_exactness(self):
        # degree-8 moment of the standard normal: E[z^8] = 105
        rule = QuadratureRule.gauss_hermite(7)
        assert (rule.p * rule.z**8).sum() == pytest.approx(105.0, rel=1e-12)

    def test_bad_weights_rejected(self):
        with pytest.raises(ValueError):
            QuadratureRule(z=np.array([-1.0, 1.0]), p=np.array([0.6, 0.6]))


class TestGrids:
    def test_linear_progression(self):
        spec = small_spec(
            w_min=1e3, w_max=5e6, cbar_min=0.0, cbar_max=10.0, cbar_nodes=11
        )
        _, c = build_grids(spec, base_prefs())
        assert np.allclose(c, np.arange(11.0), atol=1e-12)

    def test_log_progression(self):
        spec = small_spec(w_min=1.0, w_max=100.0, w_nodes=5)
        w, _ = build_grids(spec, base_prefs(w0=10.0))
        assert np.allclose(w, [1.0, np.sqrt(10), 10.0, 10 * np.sqrt(10), 100.0])

    def test_w0_node_exact(self):
        w, _ = build_grids(small_spec(), base_prefs())
        assert 1e6 in w

    def test_habit_zero_node_exact(self):
        _, c = build_grids(small_spec(), base_prefs())
        assert 0.0 in c

    def test_log_shifted_habit_spacing(self):
        spec = small_spec(cbar_spacing="log-shifted")
        _, c = build_grids(spec, base_prefs())
        assert c[0] == 0.0 and c[-1] == spec.cbar_max
        assert np.all(np.diff(c) > 0)
        # shifted-log packs nodes toward the low end
        assert c[1] - c[0] < c[-1] - c[-2]

    def test_default_spans(self):
        p = base_prefs()
        spec = GridSpec.default_for(p)
        assert spec.w_min == pytest.approx(1e-3 * p.w0)
        assert spec.w_max == pytest.approx(5 * p.w0)
        assert spec.cbar_max == pytest.approx(3 * p.w0 / p.T)
        assert (spec.w_nodes, spec.cbar_nodes, spec.n_steps) == (121, 61, 100)

    def test_w0_outside_grid_rejected(self):
        with pytest.raises(ValueError, match="outside wealth grid"):
            build_grids(small_spec(w_min=2e6), base_prefs())

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError, match="ordered"):
            build_grids(small_spec(w_min=5e6, w_max=1e3), base_prefs())
        with pytest.raises(ValueError, match="log wealth"):
            build_grids(small_spec(w_min=0.0), base_prefs())

    def test_spacing_names_validated(self):
        with pytest.raises(ValueError, match="w_spacing"):
            small_spec(w_spacing="cubic")

    def test_minimum_sizes(self):
        with pytest.raises(ValueError, match="n_steps"):
            small_spec(n_steps=1)
        with pytest.raises(ValueError, match="w_nodes"):
            small_spec(w_nodes=4)


class TestInterp2:
    def setup_method(self):
        self.w = np.geomspace(1.0, 100.0, 21)
        self.c = np.linspace(0.0, 10.0, 11)

    def test_reproduces_nodes(self):
        rng = np.random.default_rng(6)
        table = rng.normal(size=(21, 11))
        for iw in (0, 7, 20):
            for ic in (0, 5, 10):
                got = interp2(table, self.w, self.c, self.w[iw], self.c[ic])
                assert got == pytest.approx(table[iw, ic], rel=1e-14, abs=1e-14)

    def test_exact_on_quadratics(self):
        f = lambda w, c: 1.0 + 2.0 * w + 3.0 * c + 0.25 * w * w + 0.5 * c * c + w * c
        table = f(self.w[:, None], self.c[None, :])
        rng = np.random.default_rng(7)
        for _ in range(200):
            w = rng.uniform(self.w[0], self.w[-1])
            c = rng.uniform(self.c[0], self.c[-1])
            assert interp2(table, self.w, self.c, w, c) == pytest.approx(
                f(w, c), rel=1e-9
            )

    def test_cubic_error_shrinks_third_order(self):
        # halving a uniform spacing must cut the w^3 interpolation error by
        # at least 6x (O(h^3) for parabolic pieces)
        def max_err(n):
            w = np.linspace(1.0, 2.0, n)
            c = np.linspace(0.0, 1.0, 5)
            table = (w**3)[:, None] * np.ones((1, 5))
            qs = np.linspace(1.0, 2.0, 1511)[1:-1]
            return max(
                abs(interp2(table, w, c, q, 0.5) - q**3) for q in qs
            )

        e1, e2 = max_err(11), max_err(21)
        assert e1 / e2 >= 6.0

    def test_clamps_and_tallies(self):
        table = np.outer(self.w, np.ones(11))
        diag = GridEscapeDiagnostics()
        low = interp2(table, self.w, self.c, 0.5, 5.0, diag)
        high = interp2(table, self.w, self.c, 500.0, 5.0, diag)
        inside = interp2(table, self.w, self.c, 50.0, 5.0, diag)
        assert low == pytest.approx(self.w[0])
        assert high == pytest.approx(self.w[-1])
        assert diag.queries == 3
        assert diag.w_low == 1 and diag.w_high == 1
        assert diag.clamped == 2
        assert inside == pytest.approx(50.0, rel=1e-12)


class TestExpectedContinuation:
    def setup_method(self):
        self.w = np.geomspace(1e3, 5e6, 31)
        self.c = np.linspace(0.0, 3e5, 7)
        self.rule = QuadratureRule.gauss_hermite(7)

    def test_riskless_is_deterministic(self):
        rng = np.random.default_rng(8)
        table = rng.normal(size=(31, 7))
        w_net = 2e5
        got = expected_continuation(
            3, w_net, 1e4, 0.0, self.rule, table, self.w, self.c, 0.1, BASE_MKT
        )
        point = interp2(table, self.w, self.c, w_net * (1 + 0.03 * 0.1), 1e4)
        assert got == pytest.approx(point, rel=1e-12)

    def test_constant_slice(self):
        table = np.full((31, 7), 7.0)
        got = expected_continuation(
            1, 1e5, 0.0, 0.7, self.rule, table, self.w, self.c, 0.1, BASE_MKT
        )
        assert got == pytest.approx(7.0, rel=1e-12)

    def test_linear_slice_full_risky(self):
        table = np.repeat(self.w[:, None], 7, axis=1)
        w_net = 5e5
        got = expected_continuation(
            1, w_net, 0.0, 1.0, self.rule, table, self.w, self.c, 0.1, BASE_MKT
        )
        assert got == pytest.approx(w_net * (1 + 0.05 * 0.1), rel=1e-9)

    def test_rejects_bad_controls(self):
        table = np.zeros((31, 7))
        with pytest.raises(ValueError):
            expected_continuation(
                1, -1.0, 0.0, 0.5, self.rule, table, self.w, self.c, 0.1, BASE_MKT
            )
        with pytest.raises(ValueError):
            expected_continuation(
                1, 1.0, 0.0, 1.5, self.rule, table, self.w, self.c, 0.1, BASE_MKT
            )


class TestOptimizeNode:
    def test_terminal_no_bequest_consumes_everything(self, small_solution):
        prefs, spec, vt, pt = small_solution
        dt = vt.dt
        rule = QuadratureRule.gauss_hermite(7)
        zero = np.zeros_like(vt.values[-1])
        w = 1e5
        c, om, j = optimize_node(
            spec.n_steps, w, 0.0, zero, rule, prefs, BASE_MKT, dt,
            vt.w_grid, vt.cbar_grid,
        )
        assert c == pytest.approx(w / dt, rel=1e-3)
        assert om == 0.0

    def test_zero_wealth_convention(self, small_solution):
        prefs, spec, vt, _ = small_solution
        rule = QuadratureRule.gauss_hermite(7)
        c, om, j = optimize_node(
            1, 0.0, 0.0, vt.values[1], rule, prefs, BASE_MKT, vt.dt,
            vt.w_grid, vt.cbar_grid,
        )
        assert (c, om, j) == (0.0, 0.0, 0.0)

    def test_interior_weight_near_oracle(self, small_solution):
        prefs, spec, vt, _ = small_solution
        rule = QuadratureRule.gauss_hermite(7)
        _, om, _ = optimize_node(
            1, 1e6, 0.0, vt.values[1], rule, prefs, BASE_MKT, vt.dt,
            vt.w_grid, vt.cbar_grid,
        )
        assert om == pytest.approx(0.64, abs=0.05)


class TestBackwardSolve:
    def test_habit_dimension_inert_without_habit(self, small_solution):
        _, _, vt, pt = small_solution
        assert np.all(
            np.abs(pt.consumption - pt.consumption[:, :, :1]) <= 1e-10
        )
        assert np.all(
            np.abs(pt.risky_weight - pt.risky_weight[:, :, :1]) <= 1e-10
        )

    def test_terminal_step_value_is_flow_of_total_consumption(self):
        # with no bequest the last step consumes everything: its value slice
        # is the discounted flow utility of w/dt, exactly
        prefs = base_prefs(beta=0.6)
        spec = small_spec(n_steps=2, w_nodes=9, cbar_nodes=5)
        vt, pt = backward_solve(spec, prefs, BASE_MKT, threads=1)
        dt = vt.dt
        t2 = 1.5 * dt
        from habitdp import utility

        for iw, w in enumerate(vt.w_grid):
            for ic, cb in enumerate(vt.cbar_grid):
                expect = math.exp(-prefs.rho * t2) * dt * utility(w / dt, cb, prefs)
                assert vt.values[1, iw, ic] == pytest.approx(expect, rel=1e-12)
                assert pt.consumption[1, iw, ic] == pytest.approx(w / dt, rel=1e-12)

    def test_consumption_matches_oracle_at_start(self, small_solution):
        prefs, spec, vt, pt = small_solution
        sol = merton_solve(BASE_MKT, prefs)
        iw = int(np.argmin(np.abs(vt.w_grid - 1e6)))
        from habitdp import merton_consumption

        oracle = merton_consumption(vt.times[0], 1e6, sol, prefs.T)
        got = pt.consumption[0, iw, 0]
        # coarse unit-test grid: a loose envelope, tightened in acceptance
        assert got == pytest.approx(oracle, rel=0.08)

    def test_value_monotone_in_wealth(self, small_habit_solution):
        _, _, vt, _ = small_habit_solution
        assert check_value_monotone(vt)

    def test_discount_lowers_value(self):
        spec = small_spec(n_steps=10, w_nodes=17, cbar_nodes=5)
        j = {}
        for rho in (0.0, 0.10):
            prefs = base_prefs(rho=rho, beta=1.0)
            vt, _ = backward_solve(spec, prefs, BASE_MKT, threads=1)
            iw = int(np.argmin(np.abs(vt.w_grid - 1e6)))
            j[rho] = vt.values[0, iw, 0]
        assert j[0.10] < j[0.0]

    @pytest.mark.parametrize("scaled", [False, True])
    def test_terminal_slice_equals_bequest_at_nodes(self, scaled):
        from habitdp import bequest

        prefs = base_prefs(beta=1.0, bequest_b=0.7, bequest_habit_scaled=scaled)
        spec = small_spec(n_steps=4, w_nodes=9, cbar_nodes=5)
        vt, _ = backward_solve(spec, prefs, BASE_MKT, threads=1)
        for iw, w in enumerate(vt.w_grid):
            for ic, cb in enumerate(vt.cbar_grid):
                assert vt.values[-1, iw, ic] == bequest(float(w), float(cb), prefs)

    def test_midpoint_time_convention(self, small_solution):
        prefs, spec, vt, _ = small_solution
        dt = prefs.T / spec.n_steps
        expect = (np.arange(1, spec.n_steps + 1) - 0.5) * dt
        assert np.array_equal(vt.times[:-1], expect)
        assert vt.times[-1] == prefs.T

    def test_policy_tables_respect_control_box(self, small_habit_solution):
        _, _, vt, pt = small_habit_solution
        budget = vt.w_grid[None, :, None] / vt.dt
        assert np.all(pt.consumption >= 0)
        assert np.all(pt.consumption <= budget * (1 + 1e-12))
        assert np.all(pt.risky_weight >= 0)
        assert np.all(pt.risky_weight <= 1)

    def test_no_bankruptcy_under_adversarial_shocks(self, small_habit_solution):
        from habitdp import policy_lookup, wealth_step

        prefs, spec, _, pt = small_habit_solution
        rng = np.random.default_rng(11)
        w, cb = prefs.w0, 0.0
        for i in range(1, spec.n_steps + 1):
            c, om = policy_lookup(pt, i, w, cb)
            z = float(rng.choice([-50.0, 50.0, rng.normal() * 10]))
            w = wealth_step(w, c, om, z, pt.dt, BASE_MKT)
            cb = c / i + (i - 1) / i * cb
            assert w >= 0.0

    def test_thread_count_has_no_effect(self):
        prefs = base_prefs(beta=1.0)
        spec = small_spec(n_steps=6, w_nodes=17, cbar_nodes=7)
        vt1, pt1 = backward_solve(spec, prefs, BASE_MKT, threads=1)
        vt2, pt2 = backward_solve(spec, prefs, BASE_MKT, threads=2)
        assert np.array_equal(vt1.values, vt2.values)
        assert np.array_equal(pt1.consumption, pt2.consumption)
        assert np.array_equal(pt1.risky_weight, pt2.risky_weight)

    def test_diagnostics_populated(self, small_solution):
        _, _, vt, _ = small_solution
        assert vt.diagnostics.queries > 0
        assert 0.0 <= vt.diagnostics.clamped_fraction < 1.0

    def test_negative_gamma_solves(self):
        prefs = base_prefs(gamma=-1.0, beta=0.5)
        spec = small_spec(n_steps=6, w_nodes=17, cbar_nodes=7)
        vt, pt = backward_solve(spec, prefs, BASE_MKT, threads=1)
        assert np.all(np.isfinite(vt.values[0]))
        assert np.all(pt.consumption[0] > 0)


class TestPolicyLookup:
    def test_node_reproduction(self, small_solution):
        _, _, vt, pt = small_solution
        iw, ic = 12, 4
        c, om = policy_lookup(pt, 3, float(pt.w_grid[iw]), float(pt.cbar_grid[ic]))
        assert c == pytest.approx(pt.consumption[2, iw, ic], rel=1e-12)
        assert om == pytest.approx(pt.risky_weight[2, iw, ic], rel=1e-12)

    def test_below_grid_budget_clamp(self, small_solution):
        _, _, vt, pt = small_solution
        w = 10.0  # far below the lowest node
        c, om = policy_lookup(pt, 1, w, 0.0)
        assert 0.0 <= c <= w / pt.dt
        assert 0.0 <= om <= 1.0

    def test_step_bounds(self, small_solution):
        _, _, _, pt = small_solution
        with pytest.raises(ValueError):
            policy_lookup(pt, 0, 1e5, 0.0)
        with pytest.raises(ValueError):
            policy_lookup(pt, 99, 1e5, 0.0)

    def test_weight_flat_without_habit(self, default_nohabit_solution):
        _, spec, vt, pt = default_nohabit_solution
        rng = np.random.default_rng(9)
        # interior wealth region, away from both grid boundaries
        for step in (1, 5, 50, 99):
            oms = [
                policy_lookup(pt, step, rng.uniform(2e5, 2e6), rng.uniform(0, 3e5))[1]
                for _ in range(100)
            ]
            assert max(abs(om - 0.64) for om in oms) <= 0.02


class TestGenericUtilityHook:
    def test_crra_hook_matches_fast_path(self):
        prefs = base_prefs(beta=0.5, bequest_b=0.2)
        spec = small_spec(n_steps=4, w_nodes=9, cbar_nodes=5)
        vt1, pt1 = backward_solve(spec, prefs, BASE_MKT, threads=1)
        vt2, pt2 = generic_backward_solve(
            spec, prefs, BASE_MKT, base_utility=lambda x: crra(x, prefs.gamma)
        )
        assert np.allclose(vt1.values, vt2.values, rtol=1e-9, atol=1e-12)
        assert np.allclose(pt1.consumption, pt2.consumption, rtol=1e-6, atol=1e-9)
        assert np.allclose(pt1.risky_weight, pt2.risky_weight, rtol=1e-6, atol=1e-6)

    def test_log_like_utility_changes_policy(self):
        # a more curved base utility saves differently: the hook is live
        prefs = base_prefs(beta=0.5)
        spec = small_spec(n_steps=4, w_nodes=9, cbar_nodes=5)
        _, pt_crra = backward_solve(spec, prefs, BASE_MKT, threads=1)
        _, pt_sqrt = generic_backward_solve(
            spec, prefs, BASE_MKT, base_utility=lambda x: crra(x, 0.25)
        )
        assert not np.allclose(pt_crra.consumption, pt_sqrt.consumption, rtol=1e-3)
