"""Backward stochastic dynamic programming on a (time, wealth, habit) grid.

The recursion maximizes discounted flow utility plus the quadrature
expectation of the interpolated next-step value surface over the control box
[consumption in [floor, w/dt]] x [risky weight in [0, 1]], stepping from the
bequest slice back to the first decision time. Times sit at interval
midpoints t_i = (i - 1/2) * dt and all stored values are time-0 present
values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import GROWTH_FLOOR, MarketParams, Preferences, bequest, utility

# Inner-optimizer constants: coarse scan resolution, golden-section relative
# tolerance, and the consumption floor fraction applied for gamma < 0.
SCAN_POINTS = 17
GS_RELTOL = 1e-4
C_FLOOR_FRACTION = 1e-9

# Shift used by the optional log-shifted habit-grid spacing, as a fraction of
# the grid span.
LOG_SHIFT_FRACTION = 0.01

W_SPACINGS = ("log", "linear")
CBAR_SPACINGS = ("linear", "log-shifted")

_INVPHI = 0.6180339887498949
_INVPHI2 = 0.3819660112501051


@dataclass(frozen=True)
class GridSpec:
    """Discretization of time, wealth and the habit average."""

    n_steps: int = 100
    w_min: float = 0.0
    w_max: float = 0.0
    w_nodes: int = 121
    w_spacing: str = "log"
    cbar_min: float = 0.0
    cbar_max: float = 0.0
    cbar_nodes: int = 61
    cbar_spacing: str = "linear"

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError(f"grid.n_steps must be >= 2, got {self.n_steps!r}")
        if self.w_nodes < 5:
            raise ValueError(f"grid.w_nodes must be >= 5, got {self.w_nodes!r}")
        if self.cbar_nodes < 5:
            raise ValueError(
                f"grid.cbar_nodes must be >= 5, got {self.cbar_nodes!r}"
            )
        if self.w_spacing not in W_SPACINGS:
            raise ValueError(
                f"grid.w_spacing must be one of {W_SPACINGS}, got {self.w_spacing!r}"
            )
        if self.cbar_spacing not in CBAR_SPACINGS:
            raise ValueError(
                f"grid.cbar_spacing must be one of {CBAR_SPACINGS}, "
                f"got {self.cbar_spacing!r}"
            )

    @staticmethod
    def default_for(prefs: Preferences) -> "GridSpec":
        """Baseline grids: wealth on [1e-3*w0, 5*w0] (121 log nodes), habit
        on [0, 3*w0/T] (61 linear nodes), 100 time steps."""
        return GridSpec(
            n_steps=100,
            w_min=1e-3 * prefs.w0,
            w_max=5.0 * prefs.w0,
            w_nodes=121,
            w_spacing="log",
            cbar_min=0.0,
            cbar_max=3.0 * prefs.w0 / prefs.T,
            cbar_nodes=61,
            cbar_spacing="linear",
        )

    def validate_bounds(self) -> None:
        if not (self.w_min < self.w_max):
            raise ValueError(
                f"grid wealth bounds must be ordered, got [{self.w_min}, {self.w_max}]"
            )
        if not (self.cbar_min < self.cbar_max):
            raise ValueError(
                f"grid habit bounds must be ordered, got "
                f"[{self.cbar_min}, {self.cbar_max}]"
            )
        if self.w_spacing == "log" and self.w_min <= 0:
            raise ValueError("log wealth spacing requires w_min > 0")
        if self.cbar_min < 0:
            raise ValueError(f"grid.cbar_min must be >= 0, got {self.cbar_min!r}")


def _snap(nodes: np.ndarray, target: float) -> np.ndarray:
    """Move the node nearest to target exactly onto it."""
    out = nodes.copy()
    out[int(np.argmin(np.abs(out - target)))] = target
    return out


def build_grids(spec: GridSpec, prefs: Preferences) -> tuple[np.ndarray, np.ndarray]:
    """Wealth and habit node arrays for a grid specification.

    The wealth grid always contains a node exactly at w0 and the habit grid
    a node exactly at 0 (the nearest node is snapped onto the target), so
    every experiment starts from grid points.
    """
    spec.validate_bounds()
    if not (spec.w_min <= prefs.w0 <= spec.w_max):
        raise ValueError(
            f"initial wealth {prefs.w0} outside wealth grid "
            f"[{spec.w_min}, {spec.w_max}]"
        )
    if not (spec.cbar_min <= 0.0 <= spec.cbar_max):
        raise ValueError("habit grid must contain c_bar = 0")
    if spec.w_spacing == "log":
        w = np.geomspace(spec.w_min, spec.w_max, spec.w_nodes)
    else:
        w = np.linspace(spec.w_min, spec.w_max, spec.w_nodes)
    w = _snap(w, prefs.w0)

    if spec.cbar_spacing == "linear":
        c = np.linspace(spec.cbar_min, spec.cbar_max, spec.cbar_nodes)
    else:
        shift = LOG_SHIFT_FRACTION * (spec.cbar_max - spec.cbar_min)
        c = (
            np.geomspace(spec.cbar_min + shift, spec.cbar_max + shift, spec.cbar_nodes)
            - shift
        )
        c[0] = spec.cbar_min
        c[-1] = spec.cbar_max
    c = _snap(c, 0.0)

    if np.any(np.diff(w) <= 0) or np.any(np.diff(c) <= 0):
        raise ValueError("grid nodes must be strictly increasing after snapping")
    return w, c


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights approximating an expectation over a standard normal."""

    z: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if self.z.shape != self.p.shape or self.z.ndim != 1:
            raise ValueError("quadrature nodes and weights must be 1-d, same length")
        if abs(float(np.sum(self.p)) - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to 1")
        if abs(float(np.sum(self.p * self.z))) > 1e-12:
            raise ValueError("quadrature mean must be 0")
        if abs(float(np.sum(self.p * self.z**2)) - 1.0) > 1e-10:
            raise ValueError("quadrature variance must be 1")

    @staticmethod
    def gauss_hermite(n: int = 7) -> "QuadratureRule":
        """Gauss-Hermite rule mapped to N(0,1) via z = sqrt(2) * x."""
        if n < 1:
            raise ValueError(f"quadrature size must be >= 1, got {n!r}")
        x, w = np.polynomial.hermite.hermgauss(n)
        return QuadratureRule(z=np.sqrt(2.0) * x, p=w / math.sqrt(math.pi))


@dataclass
class GridEscapeDiagnostics:
    """Counts of interpolation queries clamped at each grid boundary."""

    queries: int = 0
    w_low: int = 0
    w_high: int = 0
    cbar_low: int = 0
    cbar_high: int = 0

    @property
    def clamped(self) -> int:
        return self.w_low + self.w_high + self.cbar_low + self.cbar_high

    @property
    def clamped_fraction(self) -> float:
        return self.clamped / self.queries if self.queries else 0.0

    def add_tally(self, tally: np.ndarray) -> None:
        self.w_low += int(tally[0])
        self.w_high += int(tally[1])
        self.cbar_low += int(tally[2])
        self.cbar_high += int(tally[3])
        self.queries += int(tally[4])


def _new_tally() -> np.ndarray:
    return np.zeros(5, dtype=np.int64)


@dataclass
class ValueTable:
    """Time-0-discounted value surfaces J for steps 1..N+1.

    values has shape (n_steps + 1, w_nodes, cbar_nodes); values[i-1] is the
    slice for step i and values[-1] the bequest slice.
    """

    values: np.ndarray
    w_grid: np.ndarray
    cbar_grid: np.ndarray
    times: np.ndarray
    dt: float
    spec: GridSpec
    diagnostics: GridEscapeDiagnostics = field(default_factory=GridEscapeDiagnostics)

    def slice_at(self, step_index: int) -> np.ndarray:
        return self.values[step_index - 1]


@dataclass
class PolicyTable:
    """Optimal consumption and risky-weight surfaces for steps 1..N."""

    consumption: np.ndarray
    risky_weight: np.ndarray
    w_grid: np.ndarray
    cbar_grid: np.ndarray
    times: np.ndarray
    dt: float
    spec: GridSpec


def _inv_denoms(grid: np.ndarray) -> np.ndarray:
    return _kernels.stencil_inverse_denoms(np.ascontiguousarray(grid))


def interp2(
    table: np.ndarray,
    w_grid: np.ndarray,
    cbar_grid: np.ndarray,
    w: float,
    c_bar: float,
    diagnostics: GridEscapeDiagnostics | None = None,
) -> float:
    """Piecewise-parabolic tensor-product interpolation of one table slice.

    Queries outside the grid are clamped to the boundary (constant
    extrapolation); clamps are recorded on the diagnostics object if given.
    """
    tally = _new_tally()
    val = _kernels.interp2_point(
        np.ascontiguousarray(w_grid),
        np.ascontiguousarray(cbar_grid),
        _inv_denoms(w_grid),
        _inv_denoms(cbar_grid),
        np.ascontiguousarray(table),
        float(w),
        float(c_bar),
        tally,
    )
    if diagnostics is not None:
        diagnostics.add_tally(tally)
    return float(val)


def expected_continuation(
    step_index: int,
    w_net: float,
    c_bar_next: float,
    omega: float,
    rule: QuadratureRule,
    next_slice: np.ndarray,
    w_grid: np.ndarray,
    cbar_grid: np.ndarray,
    dt: float,
    mkt: MarketParams,
    diagnostics: GridEscapeDiagnostics | None = None,
    tail_exponent: float | None = None,
) -> float:
    """Quadrature expectation of the next value slice after one transition.

    With tail_exponent set (the solver passes the utility exponent), queries
    below the wealth grid evaluate the power tail
    J(w_min) * (w / w_min)**tail_exponent instead of clamping; a clamp there
    would credit sub-grid wealth with the full w_min continuation, which
    feeds on itself through the recursion and rewards total consumption at
    small nodes. Queries above the grid clamp either way.
    """
    if w_net < 0:
        raise ValueError(f"post-consumption wealth must be >= 0, got {w_net!r}")
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"portfolio weight must be in [0, 1], got {omega!r}")
    growth = (1.0 + mkt.r * dt) + omega * (
        (mkt.mu - mkt.r) * dt + mkt.sigma * math.sqrt(dt) * rule.z
    )
    growth = np.maximum(growth, GROWTH_FLOOR)
    w_min = float(w_grid[0])
    total = 0.0
    for pk, g in zip(rule.p, growth):
        wq = w_net * g
        if tail_exponent is not None and wq < w_min:
            v_min = interp2(
                next_slice, w_grid, cbar_grid, w_min, c_bar_next, diagnostics
            )
            if wq <= 0.0:
                if tail_exponent > 0 or v_min == 0.0:
                    continue
                return -math.inf
            total += pk * v_min * (wq / w_min) ** tail_exponent
            continue
        total += pk * interp2(
            next_slice, w_grid, cbar_grid, wq, c_bar_next, diagnostics
        )
    return total


def _step_args(prefs: Preferences, mkt: MarketParams, dt: float, rule: QuadratureRule):
    base_growth = 1.0 + mkt.r * dt
    b_k = (mkt.mu - mkt.r) * dt + mkt.sigma * math.sqrt(dt) * rule.z
    c_floor = C_FLOOR_FRACTION * prefs.c0 if prefs.gamma < 0 else 0.0
    return base_growth, np.ascontiguousarray(b_k), c_floor


def optimize_node(
    step_index: int,
    w: float,
    c_bar: float,
    next_slice: np.ndarray,
    rule: QuadratureRule,
    prefs: Preferences,
    mkt: MarketParams,
    dt: float,
    w_grid: np.ndarray,
    cbar_grid: np.ndarray,
    diagnostics: GridEscapeDiagnostics | None = None,
) -> tuple[float, float, float]:
    """Optimal (consumption, weight, value) at a single state node.

    Runs exactly the node optimizer used inside backward_solve.
    """
    t_i = (step_index - 0.5) * dt
    tally = _new_tally()
    scratch = np.empty(len(w_grid))
    base_growth, b_k, c_floor = _step_args(prefs, mkt, dt, rule)
    c_opt, w_opt, j_opt = _kernels._node_solve(
        float(w),
        float(c_bar),
        1.0 / step_index,
        math.exp(-prefs.rho * t_i) * dt,
        prefs.gamma,
        prefs.beta,
        prefs.c0,
        dt,
        base_growth,
        b_k,
        np.ascontiguousarray(rule.p),
        GROWTH_FLOOR,
        c_floor,
        SCAN_POINTS,
        GS_RELTOL,
        np.ascontiguousarray(w_grid),
        np.ascontiguousarray(cbar_grid),
        _inv_denoms(w_grid),
        _inv_denoms(cbar_grid),
        np.ascontiguousarray(next_slice),
        tally,
        scratch,
    )
    if diagnostics is not None:
        diagnostics.add_tally(tally)
    return float(c_opt), float(w_opt), float(j_opt)


def terminal_slice(
    w_grid: np.ndarray, cbar_grid: np.ndarray, prefs: Preferences
) -> np.ndarray:
    """Bequest values on the grid: the base of the recursion."""
    out = np.empty((len(w_grid), len(cbar_grid)))
    for iw, w in enumerate(w_grid):
        for ic, cb in enumerate(cbar_grid):
            out[iw, ic] = bequest(float(w), float(cb), prefs)
    return out


def set_threads(n: int | None) -> int:
    """Set the kernel thread count; returns the previous value."""
    import numba

    prev = numba.get_num_threads()
    if n is not None and n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return prev


def backward_solve(
    spec: GridSpec,
    prefs: Preferences,
    mkt: MarketParams,
    rule: QuadratureRule | None = None,
    threads: int | None = None,
) -> tuple[ValueTable, PolicyTable]:
    """Solve the full recursion; returns value and policy tables.

    Deterministic: node computations are pure and written to disjoint cells,
    so output is bit-identical across runs and thread counts.
    """
    import numba

    if rule is None:
        rule = QuadratureRule.gauss_hermite(7)
    w_grid, cbar_grid = build_grids(spec, prefs)
    if prefs.gamma < 0 and w_grid[0] <= 0.0:
        raise ValueError("gamma < 0 requires a strictly positive wealth grid")
    n = spec.n_steps
    dt = prefs.T / n
    times = np.concatenate([(np.arange(1, n + 1) - 0.5) * dt, [prefs.T]])

    nw, nc = len(w_grid), len(cbar_grid)
    values = np.empty((n + 1, nw, nc))
    pol_c = np.empty((n, nw, nc))
    pol_w = np.empty((n, nw, nc))
    values[n] = terminal_slice(w_grid, cbar_grid, prefs)

    inv_dw = _inv_denoms(w_grid)
    inv_dc = _inv_denoms(cbar_grid)
    base_growth, b_k, c_floor = _step_args(prefs, mkt, dt, rule)
    quad_p = np.ascontiguousarray(rule.p)
    wg = np.ascontiguousarray(w_grid)
    cg = np.ascontiguousarray(cbar_grid)

    diag = GridEscapeDiagnostics()
    tallies = np.zeros((nw * nc, 5), dtype=np.int64)

    prev_threads = set_threads(threads)
    try:
        for i in range(n, 0, -1):
            t_i = (i - 0.5) * dt
            disc = math.exp(-prefs.rho * t_i)
            tallies[:] = 0
            _kernels.backward_step(
                wg,
                cg,
                inv_dw,
                inv_dc,
                values[i],
                values[i - 1],
                pol_c[i - 1],
                pol_w[i - 1],
                tallies,
                i,
                dt,
                disc,
                prefs.gamma,
                prefs.beta,
                prefs.c0,
                base_growth,
                b_k,
                quad_p,
                GROWTH_FLOOR,
                c_floor,
                SCAN_POINTS,
                GS_RELTOL,
            )
            diag.add_tally(tallies.sum(axis=0))
    finally:
        numba.set_num_threads(prev_threads)

    vt = ValueTable(
        values=values,
        w_grid=w_grid,
        cbar_grid=cbar_grid,
        times=times,
        dt=dt,
        spec=spec,
        diagnostics=diag,
    )
    pt = PolicyTable(
        consumption=pol_c,
        risky_weight=pol_w,
        w_grid=w_grid,
        cbar_grid=cbar_grid,
        times=times,
        dt=dt,
        spec=spec,
    )
    return vt, pt


def policy_lookup(
    tables: PolicyTable, step_index: int, w: float, c_bar: float
) -> tuple[float, float]:
    """Interpolated (consumption, weight) at a state, clamped to the box."""
    n = tables.consumption.shape[0]
    if not 1 <= step_index <= n:
        raise ValueError(f"step_index must be in 1..{n}, got {step_index!r}")
    tally = _new_tally()
    c, om = _kernels.policy_eval(
        np.ascontiguousarray(tables.w_grid),
        np.ascontiguousarray(tables.cbar_grid),
        _inv_denoms(tables.w_grid),
        _inv_denoms(tables.cbar_grid),
        np.ascontiguousarray(tables.consumption[step_index - 1]),
        np.ascontiguousarray(tables.risky_weight[step_index - 1]),
        float(w),
        float(c_bar),
        tables.dt,
        tally,
    )
    return float(c), float(om)


def check_value_monotone(
    table: ValueTable, rtol: float = 1e-10, max_violations_per_slice: int = 1
) -> bool:
    """Verify J is nondecreasing in wealth along every habit slice.

    Allows up to max_violations_per_slice adjacent node pairs per time slice
    to dip by at most rtol relative to the local value scale; anything beyond
    that is a failure.
    """
    for i in range(table.values.shape[0]):
        sl = table.values[i]
        diffs = np.diff(sl, axis=0)
        scale = np.maximum(np.abs(sl[:-1]), np.abs(sl[1:]))
        bad = diffs < -rtol * np.maximum(scale, 1e-300)
        if int(bad.sum()) > max_violations_per_slice:
            return False
    return True


def generic_backward_solve(
    spec: GridSpec,
    prefs: Preferences,
    mkt: MarketParams,
    base_utility,
    rule: QuadratureRule | None = None,
) -> tuple[ValueTable, PolicyTable]:
    """Backward solve with a pluggable one-argument utility function.

    Same discretization, scan and refinement as backward_solve, but the flow
    and bequest utilities come from base_utility(x). Runs at Python speed:
    meant for small grids and custom preference experiments.
    """
    if rule is None:
        rule = QuadratureRule.gauss_hermite(7)
    w_grid, cbar_grid = build_grids(spec, prefs)
    n = spec.n_steps
    dt = prefs.T / n
    times = np.concatenate([(np.arange(1, n + 1) - 0.5) * dt, [prefs.T]])
    nw, nc = len(w_grid), len(cbar_grid)

    values = np.empty((n + 1, nw, nc))
    pol_c = np.empty((n, nw, nc))
    pol_w = np.empty((n, nw, nc))
    for iw, w in enumerate(w_grid):
        for ic, cb in enumerate(cbar_grid):
            values[n, iw, ic] = bequest(float(w), float(cb), prefs, base=base_utility)

    _, _, c_floor = _step_args(prefs, mkt, dt, rule)

    for i in range(n, 0, -1):
        t_i = (i - 0.5) * dt
        disc = math.exp(-prefs.rho * t_i)
        next_slice = values[i]

        def objective(consumption, om, w, cb):
            cb_next = consumption / i + (i - 1.0) / i * cb
            w_net = max(w - consumption * dt, 0.0)
            ev = expected_continuation(
                i, w_net, cb_next, om, rule, next_slice, w_grid, cbar_grid,
                dt, mkt, tail_exponent=prefs.gamma,
            )
            return disc * utility(consumption, cb, prefs, base=base_utility) * dt + ev

        for iw, w in enumerate(w_grid):
            for ic, cb in enumerate(cbar_grid):
                cmax = w / dt
                if cmax <= c_floor:
                    pol_c[i - 1, iw, ic] = cmax
                    pol_w[i - 1, iw, ic] = 0.0
                    values[i - 1, iw, ic] = (
                        disc * utility(cmax, cb, prefs, base=base_utility) * dt
                    )
                    continue
                dc = (cmax - c_floor) / (SCAN_POINTS - 1)
                dw = 1.0 / (SCAN_POINTS - 1)
                best_v, best_c, best_om = -math.inf, c_floor, 0.0
                for jc in range(SCAN_POINTS):
                    cons = cmax if jc == SCAN_POINTS - 1 else c_floor + jc * dc
                    for jw in range(SCAN_POINTS):
                        om = 1.0 if jw == SCAN_POINTS - 1 else jw * dw
                        v = objective(cons, om, w, cb)
                        if v > best_v:
                            best_v, best_c, best_om = v, cons, om
                for _ in range(2):
                    a, b = max(c_floor, best_c - dc), min(cmax, best_c + dc)
                    x, v = _golden_py(
                        lambda x: objective(x, best_om, w, cb),
                        a,
                        b,
                        GS_RELTOL * (cmax - c_floor),
                    )
                    if v > best_v or (v == best_v and x < best_c):
                        best_v, best_c = v, x
                    a, b = max(0.0, best_om - dw), min(1.0, best_om + dw)
                    x, v = _golden_py(
                        lambda x: objective(best_c, x, w, cb), a, b, GS_RELTOL
                    )
                    if v > best_v or (v == best_v and x < best_om):
                        best_v, best_om = v, x
                pol_c[i - 1, iw, ic] = best_c
                pol_w[i - 1, iw, ic] = best_om
                values[i - 1, iw, ic] = best_v

    vt = ValueTable(values, w_grid, cbar_grid, times, dt, spec)
    pt = PolicyTable(pol_c, pol_w, w_grid, cbar_grid, times, dt, spec)
    return vt, pt


def _golden_py(f, a, b, tol):
    """Golden-section maximization tracking the best evaluated point."""
    h = b - a
    if h <= tol:
        x = 0.5 * (a + b)
        return x, f(x)
    xc, xd = a + _INVPHI2 * h, a + _INVPHI * h
    fc, fd = f(xc), f(xd)
    best = (xc, fc) if fc >= fd else (xd, fd)
    while h > tol:
        if fc >= fd:
            b, xd, fd = xd, xc, fc
            h = b - a
            xc = a + _INVPHI2 * h
            fc = f(xc)
            if fc > best[1] or (fc == best[1] and xc < best[0]):
                best = (xc, fc)
        else:
            a, xc, fc = xc, xd, fd
            h = b - a
            xd = a + _INVPHI * h
            fd = f(xd)
            if fd > best[1] or (fd == best[1] and xd < best[0]):
                best = (xd, fd)
    return best
