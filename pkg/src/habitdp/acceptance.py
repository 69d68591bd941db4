"""The acceptance gate: one callable check per exit criterion.

Shared by the ``check`` subcommand and the test suite. Heavy artifacts
(solves, ensembles, calibrations) are cached on the context so overlapping
criteria reuse them; the cache is sound because solver output is bit-stable
across runs and thread counts.

All checks run at the baseline experiment: w0 = 1e6, T = 10, c0 = w0/T,
r = 3%, mu = 5%, sigma = 25%, gamma = 0.5, with the discount rate, habit
strength and bequest varying per criterion.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dp import (
    GridSpec,
    QuadratureRule,
    backward_solve,
    build_grids,
    check_value_monotone,
    interp2,
)
from .merton import merton_consumption, merton_solve
from .model import (
    MarketParams,
    Preferences,
    bequest,
    habit_update,
    utility,
    wealth_step,
)
from .sim import (
    CalibrationResult,
    calibrate_bequest,
    consumption_sensitivity,
    ensemble_paths,
    simulate_ensemble,
    wealth_parametrize,
)

BASE_SEED = 20130220
N_PATHS = 1000
MERTON_WEIGHT = 0.64

# Reference calibrated bequest weights, used as soft targets only.
SOFT_B = {0.0: 0.39, 0.10: 0.62}
SOFT_B_TOL = 0.15

SINGLE_THREAD_BUDGET_S = 300.0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{self.number:2d}] {status}  {self.name}: {self.detail}"


@dataclass
class AcceptanceContext:
    """Baseline parameters plus caches for the expensive artifacts."""

    threads: int | None = None
    master_seed: int = BASE_SEED
    n_paths: int = N_PATHS
    market: MarketParams = field(
        default_factory=lambda: MarketParams(mu=0.05, sigma=0.25, r=0.03)
    )
    _solves: dict = field(default_factory=dict)
    _stats: dict = field(default_factory=dict)
    _calibrations: dict = field(default_factory=dict)
    solve_seconds_single_thread: float | None = None

    def prefs(
        self, beta: float, rho: float, b: float = 0.0, scaled: bool = False
    ) -> Preferences:
        return Preferences(
            gamma=0.5,
            rho=rho,
            beta=beta,
            c0=1e5,
            bequest_b=b,
            T=10.0,
            w0=1e6,
            bequest_habit_scaled=scaled,
        )

    def solve(
        self,
        beta: float,
        rho: float,
        b: float = 0.0,
        scaled: bool = False,
        quad_n: int = 7,
        grid_mult: int = 1,
        threads: int | None = None,
        timed: bool = False,
    ):
        key = (beta, rho, b, scaled, quad_n, grid_mult)
        if key not in self._solves:
            prefs = self.prefs(beta, rho, b, scaled)
            spec = GridSpec.default_for(prefs)
            if grid_mult != 1:
                spec = replace(
                    spec,
                    w_nodes=spec.w_nodes * grid_mult,
                    cbar_nodes=spec.cbar_nodes * grid_mult,
                )
            rule = QuadratureRule.gauss_hermite(quad_n)
            use_threads = threads if timed else (threads or self.threads)
            t0 = time.perf_counter()
            vt, pt = backward_solve(spec, prefs, self.market, rule, use_threads)
            elapsed = time.perf_counter() - t0
            if timed:
                self.solve_seconds_single_thread = elapsed
            self._solves[key] = (prefs, spec, vt, pt)
        return self._solves[key]

    def stats(self, beta: float, rho: float, b: float = 0.0, scaled: bool = False):
        key = (beta, rho, b, scaled)
        if key not in self._stats:
            prefs, spec, _, pt = self.solve(beta, rho, b, scaled)
            self._stats[key] = simulate_ensemble(
                pt, prefs, self.market, spec, self.n_paths, self.master_seed
            )
        return self._stats[key]

    def calibration(
        self, beta: float, rho: float, scaled: bool = False
    ) -> CalibrationResult:
        key = (beta, rho, scaled)
        if key not in self._calibrations:
            prefs = self.prefs(beta, rho, scaled=scaled)
            spec = GridSpec.default_for(prefs)
            self._calibrations[key] = calibrate_bequest(
                prefs,
                self.market,
                spec,
                self.n_paths,
                self.master_seed,
                threads=self.threads,
            )
        return self._calibrations[key]

    def interior_wealth_mask(self, spec: GridSpec, w_grid: np.ndarray) -> np.ndarray:
        """Nodes whose two-step quadrature fan stays strictly inside the grid.

        Continuation queries from excluded nodes hit the boundary clamp (or
        the low-wealth tail), so their policies carry boundary bias by
        construction; everything else must match the oracle.
        """
        rule = QuadratureRule.gauss_hermite(7)
        dt = 10.0 / spec.n_steps
        b_k = (self.market.mu - self.market.r) * dt + self.market.sigma * math.sqrt(
            dt
        ) * rule.z
        g_min = 1.0 + self.market.r * dt + min(b_k.min(), 0.0)
        g_max = 1.0 + self.market.r * dt + max(b_k.max(), 0.0)
        return (w_grid > w_grid[0] / g_min**2) & (w_grid < w_grid[-1] / g_max**2)


def _start_node(vt) -> tuple[int, int]:
    iw = int(np.argmin(np.abs(vt.w_grid - 1e6)))
    ic = int(np.argmin(np.abs(vt.cbar_grid)))
    return iw, ic


def criterion_1_merton_oracle(ctx: AcceptanceContext) -> CriterionResult:
    """DP equals the closed-form no-habit solution, within budgeted runtime."""
    details = []
    ok = True
    # the timed solve runs single-threaded; its tables are reused everywhere
    # since output is thread-count invariant (criterion 10 verifies that)
    prefs10, spec10, vt10, pt10 = ctx.solve(0.0, 0.10, threads=1, timed=True)
    runtime = ctx.solve_seconds_single_thread
    details.append(f"single-thread solve {runtime:.0f}s")
    ok &= runtime < SINGLE_THREAD_BUDGET_S

    for rho, (prefs, spec, vt, pt) in (
        (0.10, (prefs10, spec10, vt10, pt10)),
        (0.0, ctx.solve(0.0, 0.0)),
    ):
        sol = merton_solve(ctx.market, prefs)
        mask = ctx.interior_wealth_mask(spec, vt.w_grid)
        # the final step consumes all wealth, leaving nothing to invest; its
        # weight is the tie-break value, so the sweep covers steps 1..N-1
        dev = np.abs(pt.risky_weight[:-1][:, mask, :] - MERTON_WEIGHT).max()
        iw, ic = _start_node(vt)
        c_dp = pt.consumption[0, iw, ic]
        c_oracle = merton_consumption(vt.times[0], 1e6, sol, prefs.T)
        c_err = abs(c_dp / c_oracle - 1.0)
        details.append(
            f"rho={rho:g}: |omega-0.64|max={dev:.4f} C(t1,W0) err={c_err:.3%}"
        )
        ok &= dev <= 0.03 and c_err <= 0.02
    return CriterionResult(1, "merton oracle equivalence", bool(ok), "; ".join(details))


def _matrix_cells(ctx: AcceptanceContext):
    for beta in (0.0, 0.1, 1.0):
        for rho in (0.0, 0.10):
            yield beta, rho


def criterion_2_no_bankruptcy(ctx: AcceptanceContext) -> CriterionResult:
    """Wealth stays nonnegative on every path of the full experiment matrix."""
    worst = np.inf
    cells = 0
    for beta, rho in _matrix_cells(ctx):
        for mode in ("none", "calibrated"):
            if mode == "none":
                prefs, spec, _, pt = ctx.solve(beta, rho)
            else:
                cal = ctx.calibration(beta, rho)
                prefs, spec, _, pt = ctx.solve(beta, rho, b=cal.bequest_b)
            _, wealth, _, _, _, _ = ensemble_paths(
                pt, prefs, ctx.market, spec, ctx.n_paths, ctx.master_seed
            )
            worst = min(worst, float(wealth.min()))
            cells += 1
    ok = worst >= 0.0
    return CriterionResult(
        2,
        "no bankruptcy across matrix",
        bool(ok),
        f"{cells} cells x {ctx.n_paths} paths, min wealth {worst:.6g}",
    )


def criterion_3_habit_start_ordering(ctx: AcceptanceContext) -> CriterionResult:
    """Stronger habit lowers initial expected consumption, strictly."""
    ok = True
    details = []
    for rho in (0.10, 0.0):
        c = {b: ctx.stats(b, rho).mean_consumption[0] for b in (0.0, 0.1, 1.0)}
        ok &= c[1.0] < c[0.1] < c[0.0]
        details.append(
            f"rho={rho:g}: {c[1.0]:.0f} < {c[0.1]:.0f} < {c[0.0]:.0f}"
        )
    return CriterionResult(3, "habit start ordering", bool(ok), "; ".join(details))


def criterion_4_weight_dominance_trend(ctx: AcceptanceContext) -> CriterionResult:
    """Habit weights never beat the no-habit ratio and rise toward it.

    The consume-everything terminal step has no portfolio decision; the
    series is assessed on steps 1..N-1.
    """
    ok = True
    details = []
    for beta in (0.1, 1.0):
        for rho in (0.10, 0.0):
            om = ctx.stats(beta, rho).mean_weight[:-1]
            peak = float(om.max())
            dips = float(np.diff(om).min())
            final_gap = abs(om[-1] - MERTON_WEIGHT)
            ok &= peak <= 0.66 and dips >= -0.02 and final_gap <= 0.05
            details.append(
                f"b={beta:g},rho={rho:g}: max={peak:.3f} dip={dips:+.3f} "
                f"end gap={final_gap:.3f}"
            )
    return CriterionResult(
        4, "weight dominance and trend", bool(ok), "; ".join(details)
    )


def criterion_5_consumption_peak(ctx: AcceptanceContext) -> CriterionResult:
    """Habit paths peak away from the start; the no-habit path only decays.

    Assessed with the stated 1% noise band: the interior maximum may sit
    within the band of the global maximum (strong habit plateaus into the
    horizon), and single-step upticks inside the band do not break the
    no-habit monotone decline.
    """
    band = 0.01
    ok = True
    details = []
    c0 = ctx.stats(0.0, 0.10).mean_consumption
    decline_ok = bool(
        np.all(c0[1:] <= c0[:-1] * (1 + band)) and c0[-1] < c0[0]
    )
    ok &= decline_ok
    details.append(f"beta=0 monotone decreasing: {decline_ok}")
    for beta in (0.1, 1.0):
        c = ctx.stats(beta, 0.10).mean_consumption
        interior_max = float(c[1:-1].max())
        peak_ok = bool(
            int(np.argmax(c)) != 0 and interior_max >= (1 - band) * float(c.max())
        )
        ok &= peak_ok
        details.append(f"beta={beta:g} interior peak: {peak_ok} (argmax {np.argmax(c)})")
    return CriterionResult(5, "consumption peak", bool(ok), "; ".join(details))


def criterion_6_sensitivity_smoothing(ctx: AcceptanceContext) -> CriterionResult:
    """Relative consumption dispersion drops under strong habit (shared seeds)."""
    ok = True
    details = []
    for rho in (0.10, 0.0):
        comp = consumption_sensitivity(ctx.stats(0.0, rho), ctx.stats(1.0, rho))
        ok &= comp.fraction_b_below_a >= 0.90
        details.append(f"rho={rho:g}: fraction {comp.fraction_b_below_a:.2f}")
    return CriterionResult(6, "sensitivity smoothing", bool(ok), "; ".join(details))


def _affine_fit(x: np.ndarray, y: np.ndarray):
    a = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    rms = math.sqrt(ss_res / len(y))
    return coef, r2, rms


def criterion_7_wealth_curve_linearity(ctx: AcceptanceContext) -> CriterionResult:
    """No-habit wealth curve is affine through the origin; habit curve is not."""
    curve0 = wealth_parametrize(ctx.stats(0.0, 0.10))
    curve1 = wealth_parametrize(ctx.stats(1.0, 0.10))
    coef0, r2_0, rms0 = _affine_fit(curve0.e_wealth, curve0.e_consumption)
    _, _, rms1 = _affine_fit(curve1.e_wealth, curve1.e_consumption)
    c_range = float(curve0.e_consumption.max() - curve0.e_consumption.min())
    intercept_ok = abs(coef0[1]) < 0.02 * c_range
    r2_ok = r2_0 > 0.999
    ratio = rms1 / rms0 if rms0 > 0 else np.inf
    ratio_ok = ratio > 5.0
    ok = bool(r2_ok and intercept_ok and ratio_ok)
    return CriterionResult(
        7,
        "merton linearity in wealth space",
        ok,
        f"R2={r2_0:.5f} (>0.999: {r2_ok}); intercept {coef0[1]:.0f} vs "
        f"2% range {0.02 * c_range:.0f} ({intercept_ok}); habit/merton "
        f"residual ratio {ratio:.1f} (>5: {ratio_ok})",
    )


def criterion_8_bequest_calibration(ctx: AcceptanceContext) -> CriterionResult:
    """Calibration hits the wealth-preservation target; reference b soft."""
    ok = True
    details = []
    for rho in (0.0, 0.10):
        cal = ctx.calibration(1.0, rho)
        hard = abs(cal.expected_terminal_wealth - 1e6) <= 0.01 * 1e6
        ok &= hard
        soft = abs(cal.bequest_b - SOFT_B[rho]) <= SOFT_B_TOL
        msg = (
            f"rho={rho:g}: b={cal.bequest_b:.4g} E[W_T]={cal.expected_terminal_wealth:.4g} "
            f"hard={hard} soft(|b-{SOFT_B[rho]}|<={SOFT_B_TOL})={soft}"
        )
        if not soft:
            alt = ctx.calibration(1.0, rho, scaled=True)
            alt_soft = abs(alt.bequest_b - SOFT_B[rho]) <= SOFT_B_TOL
            msg += (
                f"; habit-scaled rerun: b={alt.bequest_b:.4g} soft={alt_soft} "
                "(neither reading matches the reported value)"
                if not alt_soft
                else f"; habit-scaled rerun matches: b={alt.bequest_b:.4g}"
            )
        details.append(msg)
    return CriterionResult(
        8, "bequest calibration", bool(ok), "; ".join(details)
    )


def criterion_9_numerical_hygiene(ctx: AcceptanceContext) -> CriterionResult:
    """Grid, quadrature, interpolation and recurrence accuracy budgets."""
    ok = True
    details = []

    # convergence probes on the strong-habit cell, where both state
    # dimensions are active
    _, _, vt_base, _ = ctx.solve(1.0, 0.10)
    iw, ic = _start_node(vt_base)
    j_base = vt_base.values[0, iw, ic]

    _, _, vt_dbl, _ = ctx.solve(1.0, 0.10, grid_mult=2)
    iw2, ic2 = _start_node(vt_dbl)
    grid_change = abs(vt_dbl.values[0, iw2, ic2] / j_base - 1.0)
    ok &= grid_change < 0.005
    details.append(f"grid doubling dJ={grid_change:.4%}")

    _, _, vt_q15, _ = ctx.solve(1.0, 0.10, quad_n=15)
    quad_change = abs(vt_q15.values[0, iw, ic] / j_base - 1.0)
    ok &= quad_change < 0.001
    details.append(f"quad 7->15 dJ={quad_change:.5%}")

    ok &= check_value_monotone(vt_base)

    # interpolation reproduces quadratics on the production grids
    prefs = ctx.prefs(1.0, 0.10)
    wg, cg = build_grids(GridSpec.default_for(prefs), prefs)
    f = lambda w, c: 2.0 + 3.0 * w + 0.5 * c + 1e-6 * w * w + 2e-4 * c * c + 1e-5 * w * c
    table = f(wg[:, None], cg[None, :])
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        w = rng.uniform(wg[1], wg[-2])
        c = rng.uniform(cg[1], cg[-2])
        got = interp2(table, wg, cg, w, c)
        worst = max(worst, abs(got / f(w, c) - 1.0))
    ok &= worst < 1e-9
    details.append(f"quadratic interp err={worst:.2e}")

    # habit recurrence telescopes to the running mean
    cons = rng.uniform(0.0, 3e5, size=1000)
    cb = 0.0
    worst_h = 0.0
    for i, ci in enumerate(cons, start=1):
        cb = habit_update(cb, float(ci), i)
        mean = cons[:i].mean()
        worst_h = max(worst_h, abs(cb - mean) / mean)
    ok &= worst_h < 1e-12
    details.append(f"habit telescoping err={worst_h:.2e}")

    ok &= _spec_example_values(ctx)
    details.append("frozen example values pass")
    return CriterionResult(9, "numerical hygiene", bool(ok), "; ".join(details))


def _spec_example_values(ctx: AcceptanceContext) -> bool:
    """The pure-math example values, frozen from independent evaluation."""
    mkt = ctx.market
    p = ctx.prefs(0.0, 0.10)
    checks = [
        abs(utility(1e5, 0.0, p) - 2.0) < 1e-12,
        utility(0.0, 5e4, p) == 0.0,
        abs(utility(2e5, 1e5, ctx.prefs(1.0, 0.10)) - 2.0) < 1e-12,
        abs(
            bequest(1e6, 0.0, replace(ctx.prefs(0.0, 0.0), bequest_b=0.39)) - 780.0
        )
        < 1e-9,
        habit_update(999.0, 5.0, 1) == 5.0,
        habit_update(5.0, 7.0, 2) == 6.0,
        abs(wealth_step(100.0, 10.0, 0.0, 0.7, 1.0, mkt) - 92.7) < 1e-12,
        wealth_step(100.0, 1000.0, 0.3, 0.1, 0.1, mkt) == 0.0,
        abs(
            wealth_step(100.0, 0.0, 1.0, 1.0, 0.1, mkt) - 108.40569415042095
        )
        < 1e-9,
    ]
    sol = merton_solve(mkt, p)
    checks += [
        abs(sol.omega_star - 0.64) < 1e-12,
        abs(sol.nu - 0.1636) < 1e-12,
        abs(merton_consumption(0.0, 1e6, sol, 10.0) - 203168.61482869106) < 1e-6,
        abs(
            merton_consumption(0.05, 1e6, merton_solve(mkt, ctx.prefs(0.0, 0.0)), 10.0)
            - 83398.73087627039
        )
        < 1e-6,
    ]
    return all(checks)


def criterion_10_determinism(ctx: AcceptanceContext) -> CriterionResult:
    """Identical configs and seeds give byte-identical CSVs at any thread count."""
    import tempfile
    from pathlib import Path

    from . import io as hio
    from .cli import main

    cfg_text = (
        "preferences.beta = 1.0\n"
        "grid.n_steps = 12\n"
        "grid.w_nodes = 31\n"
        "grid.cbar_nodes = 9\n"
        "simulation.n_paths = 40\n"
    )
    digests = []
    with tempfile.TemporaryDirectory() as td:
        cfg_path = Path(td) / "cfg.txt"
        cfg_path.write_text(cfg_text)
        for run, threads in (("a", 1), ("b", 2), ("c", 1)):
            out = Path(td) / run
            rc1 = main(
                ["--config", str(cfg_path), "--out", str(out), "--threads",
                 str(threads), "solve"]
            )
            rc2 = main(
                ["--config", str(cfg_path), "--out", str(out), "--threads",
                 str(threads), "simulate"]
            )
            if rc1 or rc2:
                return CriterionResult(
                    10, "determinism", False, f"cli run failed ({rc1}, {rc2})"
                )
            digests.append(
                tuple(
                    hio.sha256_file(out / name)
                    for name in (
                        "tables.bin",
                        "tables.csv",
                        "paths.csv",
                        "ensemble.csv",
                        "curves.csv",
                    )
                )
            )
    ok = digests[0] == digests[1] == digests[2]
    return CriterionResult(
        10,
        "determinism",
        bool(ok),
        "three runs (threads 1/2/1) produced "
        + ("identical" if ok else "DIFFERENT")
        + " file hashes",
    )


ALL_CRITERIA = [
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
]


def run_acceptance(
    threads: int | None = None,
    ctx: AcceptanceContext | None = None,
    criteria=None,
) -> list[CriterionResult]:
    """Run the acceptance suite, printing one pass/fail line per criterion."""
    if ctx is None:
        ctx = AcceptanceContext(threads=threads)
    results = []
    for fn in criteria or ALL_CRITERIA:
        result = fn(ctx)
        print(result.line(), flush=True)
        results.append(result)
    return results
