"""Table serialization, CSV emission and run manifests.

CSV files carry mandatory headers, one record per line, full double
precision (17 significant digits). The binary table snapshot starts with the
8-byte magic ``HDPTBL01`` followed by the grid specification, the step
length, both grid node arrays and the value/policy payloads as little-endian
64-bit floats in row-major (time, wealth, habit) order; round-trips are bit
exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .dp import GridSpec, PolicyTable, ValueTable

SNAPSHOT_MAGIC = b"HDPTBL01"

_W_SPACING_CODES = {"log": 0, "linear": 1}
_CBAR_SPACING_CODES = {"linear": 0, "log-shifted": 1}
_GRIDSPEC_STRUCT = struct.Struct("<qddqqddqq")


def fmt(x: float) -> str:
    """Full-precision decimal rendering used by every CSV writer."""
    return format(x, ".17g")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_snapshot(path: str | Path, value: ValueTable, policy: PolicyTable) -> None:
    spec = value.spec
    header = _GRIDSPEC_STRUCT.pack(
        spec.n_steps,
        spec.w_min,
        spec.w_max,
        spec.w_nodes,
        _W_SPACING_CODES[spec.w_spacing],
        spec.cbar_min,
        spec.cbar_max,
        spec.cbar_nodes,
        _CBAR_SPACING_CODES[spec.cbar_spacing],
    )
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(header)
        f.write(struct.pack("<d", value.dt))
        f.write(_le(value.w_grid))
        f.write(_le(value.cbar_grid))
        f.write(_le(value.values))
        f.write(_le(policy.consumption))
        f.write(_le(policy.risky_weight))


def read_snapshot(path: str | Path) -> tuple[ValueTable, PolicyTable]:
    with open(path, "rb") as f:
        magic = f.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(
                f"{path}: not a table snapshot (bad magic {magic!r})"
            )
        fields = _GRIDSPEC_STRUCT.unpack(f.read(_GRIDSPEC_STRUCT.size))
        w_codes = {v: k for k, v in _W_SPACING_CODES.items()}
        c_codes = {v: k for k, v in _CBAR_SPACING_CODES.items()}
        spec = GridSpec(
            n_steps=int(fields[0]),
            w_min=fields[1],
            w_max=fields[2],
            w_nodes=int(fields[3]),
            w_spacing=w_codes[int(fields[4])],
            cbar_min=fields[5],
            cbar_max=fields[6],
            cbar_nodes=int(fields[7]),
            cbar_spacing=c_codes[int(fields[8])],
        )
        (dt,) = struct.unpack("<d", f.read(8))
        n, nw, nc = spec.n_steps, spec.w_nodes, spec.cbar_nodes

        def arr(count: int) -> np.ndarray:
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated snapshot")
            return np.frombuffer(buf, dtype="<f8").astype(np.float64)

        w_grid = arr(nw)
        cbar_grid = arr(nc)
        values = arr((n + 1) * nw * nc).reshape(n + 1, nw, nc)
        pol_c = arr(n * nw * nc).reshape(n, nw, nc)
        pol_w = arr(n * nw * nc).reshape(n, nw, nc)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after snapshot payload")

    times = np.concatenate([(np.arange(1, n + 1) - 0.5) * dt, [n * dt]])
    vt = ValueTable(values, w_grid, cbar_grid, times, dt, spec)
    pt = PolicyTable(pol_c, pol_w, w_grid, cbar_grid, times, dt, spec)
    return vt, pt


def write_tables_csv(path: str | Path, value: ValueTable, policy: PolicyTable) -> None:
    """Value and policy surfaces, one row per (step, wealth, habit) node.

    The terminal row block carries the bequest slice with nan policies.
    """
    n = policy.consumption.shape[0]
    with open(path, "w", newline="\n") as f:
        f.write("step_index,t,W,Cbar,C_opt,omega_opt,J\n")
        for i in range(1, n + 2):
            t = value.times[i - 1]
            j_sl = value.values[i - 1]
            last = i == n + 1
            for iw, w in enumerate(value.w_grid):
                for ic, cb in enumerate(value.cbar_grid):
                    c = float("nan") if last else policy.consumption[i - 1, iw, ic]
                    om = float("nan") if last else policy.risky_weight[i - 1, iw, ic]
                    f.write(
                        f"{i},{fmt(t)},{fmt(w)},{fmt(cb)},{fmt(c)},{fmt(om)},"
                        f"{fmt(j_sl[iw, ic])}\n"
                    )


def write_paths_csv(
    path: str | Path,
    times: np.ndarray,
    stock: np.ndarray,
    wealth: np.ndarray,
    consumption: np.ndarray,
    c_bar: np.ndarray,
    weight: np.ndarray,
) -> None:
    """Per-path trajectories; consumption/weight are nan in the terminal row."""
    n_paths, n_cols = wealth.shape
    with open(path, "w", newline="\n") as f:
        f.write("path_id,step,t,stock,W,C,Cbar,omega\n")
        for p in range(n_paths):
            for i in range(n_cols):
                c = consumption[p, i] if i < n_cols - 1 else float("nan")
                om = weight[p, i] if i < n_cols - 1 else float("nan")
                f.write(
                    f"{p},{i + 1},{fmt(times[i])},{fmt(stock[p, i])},"
                    f"{fmt(wealth[p, i])},{fmt(c)},{fmt(c_bar[p, i])},{fmt(om)}\n"
                )


def write_ensemble_csv(path: str | Path, stats) -> None:
    n_cols = len(stats.mean_wealth)
    with open(path, "w", newline="\n") as f:
        f.write("step,t,mean_W,std_W,mean_C,std_C,mean_omega,std_omega,mean_S\n")
        for i in range(n_cols):
            last = i == n_cols - 1
            mc = float("nan") if last else stats.mean_consumption[i]
            sc = float("nan") if last else stats.std_consumption[i]
            mo = float("nan") if last else stats.mean_weight[i]
            so = float("nan") if last else stats.std_weight[i]
            f.write(
                f"{i + 1},{fmt(stats.times[i])},{fmt(stats.mean_wealth[i])},"
                f"{fmt(stats.std_wealth[i])},{fmt(mc)},{fmt(sc)},{fmt(mo)},"
                f"{fmt(so)},{fmt(stats.mean_stock[i])}\n"
            )


def write_curve_csv(path: str | Path, curve) -> None:
    flag = "1" if curve.wealth_monotone else "0"
    with open(path, "w", newline="\n") as f:
        f.write("t,E_W,E_C,E_omega,monotone_flag\n")
        for i in range(len(curve.e_wealth)):
            f.write(
                f"{fmt(curve.times[i])},{fmt(curve.e_wealth[i])},"
                f"{fmt(curve.e_consumption[i])},{fmt(curve.e_weight[i])},{flag}\n"
            )


def write_manifest(
    out_dir: str | Path,
    subcommand: str,
    config_text: str,
    master_seed: int,
    outputs: list[str],
) -> Path:
    """Record the run: resolved config, seed, and output content hashes."""
    out_dir = Path(out_dir)
    manifest = {
        "subcommand": subcommand,
        "config": config_text,
        "master_seed": master_seed,
        "outputs": {
            name: sha256_file(out_dir / name) for name in sorted(outputs)
        },
    }
    path = out_dir / "manifest.json"
    with open(path, "w", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
