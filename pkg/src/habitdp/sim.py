"""Forward Monte Carlo under a solved policy.

Paths are reproducible across platforms: path k of an ensemble is seeded
with splitmix64(master_seed XOR k), normals come from the Philox counter
generator (numpy.random.Philox) through the inverse normal CDF, and
statistics are reduced in fixed path order, so results never depend on the
execution schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

from . import _kernels
from .dp import (
    GridSpec,
    PolicyTable,
    QuadratureRule,
    backward_solve,
    _inv_denoms,
    _new_tally,
)
from .model import GROWTH_FLOOR, MarketParams, Preferences

# Documented reproducibility constants: change either and every published
# path changes.
PATH_GENERATOR = "philox4x64 (numpy.random.Philox), inverse-CDF normals"
SEED_MIX = "splitmix64(master_seed XOR path_index)"

_MASK64 = (1 << 64) - 1


class CalibrationError(RuntimeError):
    """Bequest calibration could not bracket or reach the target."""


def splitmix64(x: int) -> int:
    """The splitmix64 finalizer; the fixed 64-bit seed-mixing function."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def path_seed(master_seed: int, path_index: int) -> int:
    """Per-path seed: mix the master seed XOR the path index."""
    return splitmix64((master_seed ^ path_index) & _MASK64)


def normal_draws(seed: int, n: int) -> np.ndarray:
    """n standard-normal variates from the documented generator and transform."""
    gen = np.random.Generator(np.random.Philox(key=seed))
    u = gen.random(n)
    # gen.random can return exactly 0, where the inverse CDF diverges
    np.clip(u, 1e-300, None, out=u)
    return ndtri(u)


@dataclass
class SimPath:
    """One controlled trajectory.

    Arrays have n_steps + 1 entries; consumption and risky_weight are NaN in
    the terminal slot where no decision is taken.
    """

    times: np.ndarray
    stock: np.ndarray
    wealth: np.ndarray
    consumption: np.ndarray
    c_bar: np.ndarray
    risky_weight: np.ndarray
    seed: int


@dataclass
class EnsembleStats:
    """Per-step cross-path means and standard deviations.

    Wealth and stock statistics cover steps 1..N+1; consumption and weight
    statistics cover the N decision steps.
    """

    times: np.ndarray
    mean_wealth: np.ndarray
    std_wealth: np.ndarray
    mean_consumption: np.ndarray
    std_consumption: np.ndarray
    mean_weight: np.ndarray
    std_weight: np.ndarray
    mean_stock: np.ndarray
    std_stock: np.ndarray
    n_paths: int
    master_seed: int
    grid_escape_fraction: float


@dataclass
class WealthCurve:
    """Policy series re-parametrized by expected wealth, kept in time order."""

    e_wealth: np.ndarray
    e_consumption: np.ndarray
    e_weight: np.ndarray
    times: np.ndarray
    wealth_monotone: bool


@dataclass
class SensitivityComparison:
    """Relative consumption dispersion std(C)/mean(C) for two runs."""

    sensitivity_a: np.ndarray
    sensitivity_b: np.ndarray
    fraction_b_below_a: float


@dataclass
class CalibrationResult:
    """Outcome of the bequest-weight search."""

    bequest_b: float
    expected_terminal_wealth: float
    target: float
    trials: list[tuple[float, float]]


def _check_grids(policy: PolicyTable, spec: GridSpec) -> None:
    if policy.spec != spec:
        raise ValueError(
            "policy was solved on a different grid specification than requested"
        )


def _run_paths(
    policy: PolicyTable,
    prefs: Preferences,
    mkt: MarketParams,
    z_mat: np.ndarray,
):
    """Drive the path kernel; returns raw per-path arrays and diagnostics."""
    n_paths, n_steps = z_mat.shape
    out_s = np.empty((n_paths, n_steps + 1))
    out_w = np.empty((n_paths, n_steps + 1))
    out_cb = np.empty((n_paths, n_steps + 1))
    out_c = np.empty((n_paths, n_steps))
    out_om = np.empty((n_paths, n_steps))
    escapes = np.zeros(n_paths, dtype=np.int64)
    tally = _new_tally()
    _kernels.simulate_paths(
        np.ascontiguousarray(policy.w_grid),
        np.ascontiguousarray(policy.cbar_grid),
        _inv_denoms(policy.w_grid),
        _inv_denoms(policy.cbar_grid),
        np.ascontiguousarray(policy.consumption),
        np.ascontiguousarray(policy.risky_weight),
        np.ascontiguousarray(z_mat),
        prefs.w0,
        policy.dt,
        mkt.r,
        mkt.mu,
        mkt.sigma * math.sqrt(policy.dt),
        GROWTH_FLOOR,
        out_s,
        out_w,
        out_c,
        out_cb,
        out_om,
        escapes,
        tally,
    )
    return out_s, out_w, out_c, out_cb, out_om, escapes


def _path_times(policy: PolicyTable) -> np.ndarray:
    return policy.times


def simulate_path(
    policy: PolicyTable,
    prefs: Preferences,
    mkt: MarketParams,
    spec: GridSpec,
    seed: int,
) -> SimPath:
    """One path from (w0, habit 0), fully determined by the seed.

    At each step the policy is interpolated at the current state, the shock
    drawn, and wealth, habit average and the stock index advanced together
    with the same growth-factor floor as the solver.
    """
    _check_grids(policy, spec)
    n_steps = policy.consumption.shape[0]
    z = normal_draws(seed, n_steps).reshape(1, n_steps)
    s, w, c, cb, om, _ = _run_paths(policy, prefs, mkt, z)
    return SimPath(
        times=_path_times(policy),
        stock=s[0],
        wealth=w[0],
        consumption=np.append(c[0], np.nan),
        c_bar=cb[0],
        risky_weight=np.append(om[0], np.nan),
        seed=seed,
    )


def ensemble_paths(
    policy: PolicyTable,
    prefs: Preferences,
    mkt: MarketParams,
    spec: GridSpec,
    n_paths: int,
    master_seed: int,
):
    """Raw per-path arrays (stock, wealth, consumption, habit, weight,
    escape counts) for an ensemble; path k is seeded with
    path_seed(master_seed, k)."""
    _check_grids(policy, spec)
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths!r}")
    n_steps = policy.consumption.shape[0]
    z = np.empty((n_paths, n_steps))
    for k in range(n_paths):
        z[k] = normal_draws(path_seed(master_seed, k), n_steps)
    return _run_paths(policy, prefs, mkt, z)


def simulate_ensemble(
    policy: PolicyTable,
    prefs: Preferences,
    mkt: MarketParams,
    spec: GridSpec,
    n_paths: int,
    master_seed: int,
) -> EnsembleStats:
    """Cross-path statistics over n_paths independently seeded paths."""
    s, w, c, cb, om, escapes = ensemble_paths(
        policy, prefs, mkt, spec, n_paths, master_seed
    )
    n_steps = policy.consumption.shape[0]
    return EnsembleStats(
        times=_path_times(policy),
        mean_wealth=w.mean(axis=0),
        std_wealth=w.std(axis=0),
        mean_consumption=c.mean(axis=0),
        std_consumption=c.std(axis=0),
        mean_weight=om.mean(axis=0),
        std_weight=om.std(axis=0),
        mean_stock=s.mean(axis=0),
        std_stock=s.std(axis=0),
        n_paths=n_paths,
        master_seed=master_seed,
        grid_escape_fraction=float(escapes.sum()) / (n_paths * n_steps),
    )


def wealth_parametrize(stats: EnsembleStats) -> WealthCurve:
    """Pair expected policies with expected wealth, ordered by time.

    The inversion is representational: points are never reordered or
    interpolated, matching a parametric plot of the two series. Non-monotone
    expected wealth is flagged, not rejected.
    """
    n = len(stats.mean_consumption)
    if n == 0:
        raise ValueError("ensemble statistics are empty")
    e_w = stats.mean_wealth[:n]
    diffs = np.diff(e_w)
    monotone = bool(np.all(diffs > 0) or np.all(diffs < 0)) if n > 1 else True
    return WealthCurve(
        e_wealth=e_w.copy(),
        e_consumption=stats.mean_consumption.copy(),
        e_weight=stats.mean_weight.copy(),
        times=stats.times[:n].copy(),
        wealth_monotone=monotone,
    )


def consumption_sensitivity(
    stats_a: EnsembleStats, stats_b: EnsembleStats
) -> SensitivityComparison:
    """std(C)/mean(C) per step for two runs plus the mid-horizon comparison.

    The fraction counts strictly-lower steps of run b among the middle half
    of the horizon; ties count toward the denominator only.
    """
    n = len(stats_a.mean_consumption)
    if len(stats_b.mean_consumption) != n:
        raise ValueError("ensembles have different step counts")

    def ratio(stats):
        mean = stats.mean_consumption
        out = np.zeros_like(mean)
        nz = mean != 0.0
        out[nz] = stats.std_consumption[nz] / mean[nz]
        return out

    sens_a = ratio(stats_a)
    sens_b = ratio(stats_b)
    lo = n // 4  # middle half: steps lo+1 .. lo+n//2 (1-based)
    mid = slice(lo, lo + n // 2)
    below = np.sum(sens_b[mid] < sens_a[mid])
    count = sens_a[mid].shape[0]
    return SensitivityComparison(
        sensitivity_a=sens_a,
        sensitivity_b=sens_b,
        fraction_b_below_a=float(below) / count if count else 0.0,
    )


def calibrate_bequest(
    prefs: Preferences,
    mkt: MarketParams,
    spec: GridSpec,
    n_paths: int,
    master_seed: int,
    target: float | None = None,
    rule: QuadratureRule | None = None,
    threads: int | None = None,
    b_max: float = 50.0,
    tol_fraction: float = 0.01,
    max_iter: int = 64,
) -> CalibrationResult:
    """Bequest weight making expected terminal wealth hit the target.

    Bisection on [0, b_max]; every trial re-solves the recursion (the bequest
    enters the terminal condition) and simulates the ensemble with the same
    master seed, so the objective is deterministic in b. Stops when
    |E[W_T] - target| <= tol_fraction * target.
    """
    if target is None:
        target = prefs.w0
    if target <= 0:
        raise ValueError(f"target must be > 0, got {target!r}")
    tol = tol_fraction * target
    trials: list[tuple[float, float]] = []

    def terminal_wealth(b: float) -> float:
        p = replace(prefs, bequest_b=b)
        _, pol = backward_solve(spec, p, mkt, rule=rule, threads=threads)
        stats = simulate_ensemble(pol, p, mkt, spec, n_paths, master_seed)
        e = float(stats.mean_wealth[-1])
        trials.append((b, e))
        return e

    e_lo = terminal_wealth(0.0)
    if abs(e_lo - target) <= tol:
        return CalibrationResult(0.0, e_lo, target, trials)
    if e_lo > target:
        raise CalibrationError(
            f"expected terminal wealth {e_lo:.6g} already above target "
            f"{target:.6g} at b = 0"
        )
    e_hi = terminal_wealth(b_max)
    if e_hi < target - tol:
        raise CalibrationError(
            f"non-bracketing: expected terminal wealth {e_hi:.6g} at "
            f"b = {b_max} still below target {target:.6g}"
        )
    if abs(e_hi - target) <= tol:
        return CalibrationResult(b_max, e_hi, target, trials)

    lo, hi = 0.0, b_max
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        e = terminal_wealth(mid)
        if abs(e - target) <= tol:
            return CalibrationResult(mid, e, target, trials)
        if e < target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"bisection did not reach |E[W_T] - target| <= {tol:.6g} in "
        f"{max_iter} iterations"
    )
