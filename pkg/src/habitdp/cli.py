"""Command-line driver: config ingestion, experiment orchestration, output.

Config files are flat ``section.key = value`` lines (``#`` comments allowed).
Every run writes its outputs plus a ``manifest.json`` recording the resolved
config, the master seed and content hashes of all emitted files. Failures
print one machine-readable JSON line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as hio
from .dp import (
    GridSpec,
    QuadratureRule,
    backward_solve,
    build_grids,
    check_value_monotone,
)
from .merton import merton_consumption, merton_solve
from .model import MarketParams, Preferences, habit_update, wealth_step
from .sim import (
    calibrate_bequest,
    ensemble_paths,
    normal_draws,
    simulate_ensemble,
    simulate_path,
    wealth_parametrize,
)

DEFAULT_MASTER_SEED = 20130220
DEFAULT_OUT_DIR = "out"
SNAPSHOT_NAME = "tables.bin"


class ConfigError(ValueError):
    """Config file could not be parsed or validated."""


@dataclass(frozen=True)
class MatrixCell:
    """One experiment: a habit strength, a discount rate, a bequest mode."""

    name: str
    beta: float
    rho: float
    bequest: str = "none"  # none | calibrated | fixed
    bequest_b: float = 0.0


@dataclass(frozen=True)
class ExperimentMatrix:
    cells: tuple[MatrixCell, ...]

    def __post_init__(self):
        if not self.cells:
            raise ConfigError("matrix: at least one cell is required")
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise ConfigError(f"matrix: duplicate cell names in {names}")


def default_matrix() -> ExperimentMatrix:
    """The no-bequest comparison grid: beta 0/0.1/1 at both discount rates."""
    cells = []
    for rho, tag in ((0.10, "rho10"), (0.0, "rho0")):
        cells.append(MatrixCell(f"merton_{tag}", 0.0, rho))
        cells.append(MatrixCell(f"weak_{tag}", 0.1, rho))
        cells.append(MatrixCell(f"strong_{tag}", 1.0, rho))
    return ExperimentMatrix(tuple(cells))


@dataclass
class RunConfig:
    """Fully resolved experiment description."""

    market: MarketParams
    preferences: Preferences
    grid: GridSpec
    quad_nodes: int
    n_paths: int
    master_seed: int
    out_dir: str
    matrix: ExperimentMatrix | None
    text: str = field(repr=False, default="")

    def rule(self) -> QuadratureRule:
        return QuadratureRule.gauss_hermite(self.quad_nodes)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_lines(text: str) -> dict[str, tuple[str, int]]:
    values: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = (value, lineno)
    return values


class _Fields:
    def __init__(self, values: dict[str, tuple[str, int]]):
        self.values = values
        self.used: set[str] = set()

    def _get(self, key, cast, default):
        if key not in self.values:
            return default
        self.used.add(key)
        raw, lineno = self.values[key]
        try:
            return cast(raw)
        except (ValueError, KeyError):
            raise ConfigError(
                f"line {lineno}: field {key}: cannot parse {raw!r}"
            ) from None

    def num(self, key, default):
        return self._get(key, float, default)

    def integer(self, key, default):
        return self._get(key, lambda s: int(s, 0), default)

    def text(self, key, default):
        return self._get(key, str, default)

    def boolean(self, key, default):
        return self._get(key, lambda s: _BOOL[s.lower()], default)

    def unused(self):
        return sorted(set(self.values) - self.used)


def _parse_matrix_cell(name: str, raw: str, lineno: int) -> MatrixCell:
    beta = rho = None
    mode, b_val = "none", 0.0
    for token in raw.replace(",", " ").split():
        key, _, value = token.partition("=")
        try:
            if key == "beta":
                beta = float(value)
            elif key == "rho":
                rho = float(value)
            elif key == "bequest":
                if value in ("none", "calibrated"):
                    mode = value
                elif value.startswith("b:"):
                    mode, b_val = "fixed", float(value[2:])
                else:
                    raise ValueError(value)
            else:
                raise ValueError(key)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: field matrix.{name}: bad token {token!r} "
                "(expected beta=<x> rho=<y> [bequest=none|calibrated|b:<v>])"
            ) from None
    if beta is None or rho is None:
        raise ConfigError(
            f"line {lineno}: field matrix.{name}: beta and rho are required"
        )
    return MatrixCell(name, beta, rho, mode, b_val)


def load_config(source: str | Path | None = None, inline: str | None = None) -> RunConfig:
    """Build a RunConfig from a file path or inline text.

    Missing keys fall back to the baseline experiment: w0 = 1e6, T = 10,
    c0 = w0/T, r = 3%, mu = 5%, sigma = 25%, gamma = 0.5, rho = 10%,
    beta = 0.1, no bequest, default grids, 7 quadrature nodes, 1000 paths.
    """
    if inline is not None:
        text = inline
    elif source is not None:
        try:
            text = Path(source).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {source}: {e}") from None
    else:
        text = ""

    fields = _Fields(_parse_lines(text))

    try:
        market = MarketParams(
            mu=fields.num("market.mu", 0.05),
            sigma=fields.num("market.sigma", 0.25),
            r=fields.num("market.r", 0.03),
        )
        w0 = fields.num("preferences.w0", 1e6)
        horizon = fields.num("preferences.T", 10.0)
        prefs = Preferences(
            gamma=fields.num("preferences.gamma", 0.5),
            rho=fields.num("preferences.rho", 0.10),
            beta=fields.num("preferences.beta", 0.1),
            c0=fields.num("preferences.c0", w0 / horizon if horizon > 0 else 1.0),
            bequest_b=fields.num("preferences.bequest_b", 0.0),
            T=horizon,
            w0=w0,
            bequest_habit_scaled=fields.boolean(
                "preferences.bequest_habit_scaled", False
            ),
        )
        grid_defaults = GridSpec.default_for(prefs)
        grid = GridSpec(
            n_steps=fields.integer("grid.n_steps", grid_defaults.n_steps),
            w_min=fields.num("grid.w_min", grid_defaults.w_min),
            w_max=fields.num("grid.w_max", grid_defaults.w_max),
            w_nodes=fields.integer("grid.w_nodes", grid_defaults.w_nodes),
            w_spacing=fields.text("grid.w_spacing", grid_defaults.w_spacing),
            cbar_min=fields.num("grid.cbar_min", grid_defaults.cbar_min),
            cbar_max=fields.num("grid.cbar_max", grid_defaults.cbar_max),
            cbar_nodes=fields.integer("grid.cbar_nodes", grid_defaults.cbar_nodes),
            cbar_spacing=fields.text("grid.cbar_spacing", grid_defaults.cbar_spacing),
        )
        grid.validate_bounds()
        quad_nodes = fields.integer("quadrature.n_nodes", 7)
        if quad_nodes < 1:
            raise ConfigError("field quadrature.n_nodes: must be >= 1")
        n_paths = fields.integer("simulation.n_paths", 1000)
        if n_paths < 1:
            raise ConfigError("field simulation.n_paths: must be >= 1")
        master_seed = fields.integer("simulation.master_seed", DEFAULT_MASTER_SEED)
        out_dir = fields.text("output.dir", DEFAULT_OUT_DIR)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None

    matrix_keys = [k for k in fields.values if k.startswith("matrix.")]
    matrix = None
    if matrix_keys:
        cells = []
        for key in matrix_keys:
            raw, lineno = fields.values[key]
            fields.used.add(key)
            cells.append(_parse_matrix_cell(key[len("matrix.") :], raw, lineno))
        matrix = ExperimentMatrix(tuple(cells))

    unknown = fields.unused()
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    return RunConfig(
        market=market,
        preferences=prefs,
        grid=grid,
        quad_nodes=quad_nodes,
        n_paths=n_paths,
        master_seed=master_seed,
        out_dir=out_dir,
        matrix=matrix,
        text=text,
    )


def _resolved_text(cfg: RunConfig) -> str:
    """Canonical flat rendering of the fully resolved config."""
    p, m, g = cfg.preferences, cfg.market, cfg.grid
    lines = [
        f"market.mu = {hio.fmt(m.mu)}",
        f"market.sigma = {hio.fmt(m.sigma)}",
        f"market.r = {hio.fmt(m.r)}",
        f"preferences.gamma = {hio.fmt(p.gamma)}",
        f"preferences.rho = {hio.fmt(p.rho)}",
        f"preferences.beta = {hio.fmt(p.beta)}",
        f"preferences.c0 = {hio.fmt(p.c0)}",
        f"preferences.bequest_b = {hio.fmt(p.bequest_b)}",
        f"preferences.bequest_habit_scaled = {str(p.bequest_habit_scaled).lower()}",
        f"preferences.T = {hio.fmt(p.T)}",
        f"preferences.w0 = {hio.fmt(p.w0)}",
        f"grid.n_steps = {g.n_steps}",
        f"grid.w_min = {hio.fmt(g.w_min)}",
        f"grid.w_max = {hio.fmt(g.w_max)}",
        f"grid.w_nodes = {g.w_nodes}",
        f"grid.w_spacing = {g.w_spacing}",
        f"grid.cbar_min = {hio.fmt(g.cbar_min)}",
        f"grid.cbar_max = {hio.fmt(g.cbar_max)}",
        f"grid.cbar_nodes = {g.cbar_nodes}",
        f"grid.cbar_spacing = {g.cbar_spacing}",
        f"quadrature.n_nodes = {cfg.quad_nodes}",
        f"simulation.n_paths = {cfg.n_paths}",
        f"simulation.master_seed = {cfg.master_seed}",
        f"output.dir = {cfg.out_dir}",
    ]
    if cfg.matrix is not None:
        for c in cfg.matrix.cells:
            beq = c.bequest if c.bequest != "fixed" else f"b:{hio.fmt(c.bequest_b)}"
            lines.append(
                f"matrix.{c.name} = beta={hio.fmt(c.beta)} rho={hio.fmt(c.rho)} "
                f"bequest={beq}"
            )
    return "\n".join(lines) + "\n"


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    scale = getattr(args, "grid_scale", None)
    if scale is not None:
        if scale <= 0:
            raise ConfigError("--grid-scale must be > 0")
        g = cfg.grid
        cfg = replace(
            cfg,
            grid=replace(
                g,
                w_nodes=max(5, int(round(g.w_nodes * scale))),
                cbar_nodes=max(5, int(round(g.cbar_nodes * scale))),
            ),
        )
    return cfg


def _threads(args) -> int | None:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("HABITDP_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"HABITDP_THREADS is not an integer: {env!r}") from None
    return None


def _solve(cfg: RunConfig, threads: int | None):
    return backward_solve(
        cfg.grid, cfg.preferences, cfg.market, rule=cfg.rule(), threads=threads
    )


def cmd_solve(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vt, pt = _solve(cfg, _threads(args))
    hio.write_snapshot(out / SNAPSHOT_NAME, vt, pt)
    hio.write_tables_csv(out / "tables.csv", vt, pt)
    hio.write_manifest(
        out, "solve", _resolved_text(cfg), cfg.master_seed,
        [SNAPSHOT_NAME, "tables.csv"],
    )
    print(
        f"solved {cfg.grid.n_steps} steps on {cfg.grid.w_nodes}x"
        f"{cfg.grid.cbar_nodes} nodes; escape fraction "
        f"{vt.diagnostics.clamped_fraction:.3e}; J monotone in wealth: "
        f"{check_value_monotone(vt)}"
    )
    return 0


def _load_or_solve(cfg: RunConfig, args):
    out = Path(cfg.out_dir)
    snap = out / SNAPSHOT_NAME
    if snap.exists():
        vt, pt = hio.read_snapshot(snap)
        if pt.spec != cfg.grid:
            raise ConfigError(
                f"snapshot {snap} was solved on a different grid than the config"
            )
        expected_w, expected_c = build_grids(cfg.grid, cfg.preferences)
        if not (
            np.array_equal(expected_w, pt.w_grid)
            and np.array_equal(expected_c, pt.cbar_grid)
        ):
            raise ConfigError(
                f"snapshot {snap} grids do not match the config preferences"
            )
        return vt, pt
    return _solve(cfg, _threads(args))


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, pt = _load_or_solve(cfg, args)
    stock, wealth, cons, c_bar, weight, _ = ensemble_paths(
        pt, cfg.preferences, cfg.market, cfg.grid, cfg.n_paths, cfg.master_seed
    )
    stats = simulate_ensemble(
        pt, cfg.preferences, cfg.market, cfg.grid, cfg.n_paths, cfg.master_seed
    )
    curve = wealth_parametrize(stats)
    hio.write_paths_csv(out / "paths.csv", pt.times, stock, wealth, cons, c_bar, weight)
    hio.write_ensemble_csv(out / "ensemble.csv", stats)
    hio.write_curve_csv(out / "curves.csv", curve)
    hio.write_manifest(
        out, "simulate", _resolved_text(cfg), cfg.master_seed,
        ["paths.csv", "ensemble.csv", "curves.csv"],
    )
    print(
        f"simulated {cfg.n_paths} paths, seed {cfg.master_seed}; "
        f"E[W_T] = {stats.mean_wealth[-1]:.6g}; grid escapes "
        f"{stats.grid_escape_fraction:.3e}"
    )
    return 0


def cmd_merton(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sol = merton_solve(cfg.market, cfg.preferences)
    print(f"omega_star = {sol.omega_star:.6g}")
    print(f"omega_star_clamped = {sol.omega_star_clamped:.6g}")
    print(f"nu = {sol.nu:.6g}")

    # closed-form policy driven through the same wealth recursion
    p, m = cfg.preferences, cfg.market
    n = cfg.grid.n_steps
    dt = p.T / n
    times = np.concatenate([(np.arange(1, n + 1) - 0.5) * dt, [p.T]])
    z = normal_draws(cfg.master_seed, n)
    w = np.empty(n + 1)
    s = np.empty(n + 1)
    cb = np.empty(n + 1)
    cons = np.empty(n)
    wt = np.empty(n)
    w[0], s[0], cb[0] = p.w0, 1.0, 0.0
    for i in range(1, n + 1):
        c_rate = min(merton_consumption(times[i - 1], w[i - 1], sol, p.T), w[i - 1] / dt)
        om = sol.omega_star_clamped
        cons[i - 1], wt[i - 1] = c_rate, om
        w[i] = wealth_step(w[i - 1], c_rate, om, z[i - 1], dt, m)
        s[i] = s[i - 1] * max(1.0 + m.mu * dt + m.sigma * np.sqrt(dt) * z[i - 1], 1e-6)
        cb[i] = habit_update(cb[i - 1], c_rate, i)
    hio.write_paths_csv(
        out / "merton_path.csv",
        times,
        s[None, :],
        w[None, :],
        cons[None, :],
        cb[None, :],
        wt[None, :],
    )
    hio.write_manifest(
        out, "merton", _resolved_text(cfg), cfg.master_seed, ["merton_path.csv"]
    )
    return 0


def cmd_calibrate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = calibrate_bequest(
        cfg.preferences,
        cfg.market,
        cfg.grid,
        cfg.n_paths,
        cfg.master_seed,
        rule=cfg.rule(),
        threads=_threads(args),
    )
    with open(out / "calibration.csv", "w", newline="\n") as f:
        f.write("trial,b,expected_terminal_wealth\n")
        for k, (b, e) in enumerate(result.trials):
            f.write(f"{k},{hio.fmt(b)},{hio.fmt(e)}\n")
    hio.write_manifest(
        out, "calibrate", _resolved_text(cfg), cfg.master_seed, ["calibration.csv"]
    )
    print(
        f"calibrated b = {result.bequest_b:.6g} "
        f"(E[W_T] = {result.expected_terminal_wealth:.6g}, "
        f"target {result.target:.6g}, {len(result.trials)} trials)"
    )
    return 0


_PLOT_STUB = """\
#!/usr/bin/env python3
# Plot stub generated by habitdp compare. Reads the side-by-side CSVs in this
# directory and draws the consumption / weight / wealth comparison panels.
import matplotlib.pyplot as plt
import numpy as np

def load(name):
    data = np.genfromtxt(name, delimiter=",", names=True)
    return data

for metric in ("consumption", "omega", "wealth", "sensitivity"):
    data = load(f"compare_{metric}.csv")
    cols = [c for c in data.dtype.names if c != "t"]
    plt.figure()
    for c in cols:
        plt.plot(data["t"], data[c], label=c)
    plt.xlabel("t (years)")
    plt.ylabel(metric)
    plt.legend()
    plt.savefig(f"compare_{metric}.png", dpi=150)
print("wrote compare_*.png")
"""


def _cell_config(cfg: RunConfig, cell: MatrixCell) -> RunConfig:
    prefs = replace(
        cfg.preferences,
        beta=cell.beta,
        rho=cell.rho,
        bequest_b=cell.bequest_b if cell.bequest == "fixed" else 0.0,
    )
    return replace(cfg, preferences=prefs)


def run_cell(cfg: RunConfig, cell: MatrixCell, threads: int | None):
    """Solve (calibrating the bequest first if asked) and simulate one cell."""
    ccfg = _cell_config(cfg, cell)
    prefs = ccfg.preferences
    calibrated = None
    if cell.bequest == "calibrated":
        calibrated = calibrate_bequest(
            prefs,
            ccfg.market,
            ccfg.grid,
            ccfg.n_paths,
            ccfg.master_seed,
            rule=ccfg.rule(),
            threads=threads,
        )
        prefs = replace(prefs, bequest_b=calibrated.bequest_b)
    vt, pt = backward_solve(
        ccfg.grid, prefs, ccfg.market, rule=ccfg.rule(), threads=threads
    )
    stats = simulate_ensemble(
        pt, prefs, ccfg.market, ccfg.grid, ccfg.n_paths, ccfg.master_seed
    )
    return prefs, vt, pt, stats, calibrated


def cmd_compare(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix = cfg.matrix or default_matrix()
    threads = _threads(args)
    outputs = []
    series_c, series_o, series_w, series_sens = {}, {}, {}, {}
    times_mid = None
    for cell in matrix.cells:
        prefs, vt, pt, stats, calibrated = run_cell(cfg, cell, threads)
        curve = wealth_parametrize(stats)
        # one shared-seed realization per cell: the same shocks hit every
        # policy, so differences are purely the policy's doing
        sp = simulate_path(pt, prefs, cfg.market, cfg.grid, cfg.master_seed)
        n = len(stats.mean_consumption)
        times_mid = stats.times[:n]
        series_c[cell.name] = stats.mean_consumption
        series_o[cell.name] = stats.mean_weight
        series_w[cell.name] = stats.mean_wealth[:n]
        mean = np.where(stats.mean_consumption == 0, 1.0, stats.mean_consumption)
        series_sens[cell.name] = stats.std_consumption / mean
        ens_name = f"cell_{cell.name}_ensemble.csv"
        curve_name = f"cell_{cell.name}_curves.csv"
        path_name = f"cell_{cell.name}_path.csv"
        hio.write_ensemble_csv(out / ens_name, stats)
        hio.write_curve_csv(out / curve_name, curve)
        hio.write_paths_csv(
            out / path_name,
            pt.times,
            sp.stock[None, :],
            sp.wealth[None, :],
            sp.consumption[None, :-1],
            sp.c_bar[None, :],
            sp.risky_weight[None, :-1],
        )
        outputs += [ens_name, curve_name, path_name]
        if calibrated is not None:
            print(
                f"cell {cell.name}: calibrated b = {calibrated.bequest_b:.6g} "
                f"(E[W_T] = {calibrated.expected_terminal_wealth:.6g})"
            )

    for metric, series in (
        ("consumption", series_c),
        ("omega", series_o),
        ("wealth", series_w),
        ("sensitivity", series_sens),
    ):
        name = f"compare_{metric}.csv"
        with open(out / name, "w", newline="\n") as f:
            cols = [c.name for c in matrix.cells]
            f.write("t," + ",".join(cols) + "\n")
            for i, t in enumerate(times_mid):
                f.write(
                    ",".join([hio.fmt(t)] + [hio.fmt(series[c][i]) for c in cols])
                    + "\n"
                )
        outputs.append(name)

    stub = out / "plot_compare.py"
    stub.write_text(_PLOT_STUB)
    outputs.append("plot_compare.py")
    hio.write_manifest(out, "compare", _resolved_text(cfg), cfg.master_seed, outputs)
    print(f"compared {len(matrix.cells)} cells into {out}")
    return 0


def cmd_check(cfg: RunConfig, args) -> int:
    from .acceptance import run_acceptance

    results = run_acceptance(threads=_threads(args))
    return 0 if all(r.passed for r in results) else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="habitdp",
        description=(
            "Lifetime consumption/portfolio policies under habit formation: "
            "dynamic-programming solver, closed-form no-habit oracle, and "
            "seeded Monte Carlo experiments."
        ),
    )
    parser.add_argument("--config", help="path to a flat key = value config file")
    parser.add_argument("--seed", type=int, help="override simulation.master_seed")
    parser.add_argument("--out", help="override output.dir")
    parser.add_argument(
        "--threads", type=int, help="solver threads (env HABITDP_THREADS as fallback)"
    )
    parser.add_argument(
        "--grid-scale",
        type=float,
        dest="grid_scale",
        help="multiply grid node counts for convergence studies",
    )
    parser.add_argument(
        "subcommand",
        choices=["solve", "simulate", "merton", "calibrate", "compare", "check"],
    )
    args = parser.parse_args(argv)

    try:
        cfg = _apply_overrides(load_config(args.config), args)
        handler = {
            "solve": cmd_solve,
            "simulate": cmd_simulate,
            "merton": cmd_merton,
            "calibrate": cmd_calibrate,
            "compare": cmd_compare,
            "check": cmd_check,
        }[args.subcommand]
        return handler(cfg, args)
    except Exception as e:  # noqa: BLE001 - single reporting point
        print(
            json.dumps({"error": type(e).__name__, "message": str(e)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
