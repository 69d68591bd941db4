"""Problem parameters and the pure mathematical primitives.

Everything here is a plain function of its arguments: relative-consumption
utility, terminal bequest, the running-average habit update, and the one-step
wealth transition. No grids, no randomness, no state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

# Floor applied to the one-step arithmetic growth factor. Extreme negative
# shocks can push the raw factor below zero; flooring keeps wealth nonnegative.
# With 7-node quadrature (|z| <= 3.76) and the baseline parameters the floor
# never binds.
GROWTH_FLOOR = 1e-6


@dataclass(frozen=True)
class MarketParams:
    """Two-asset market: risky drift/volatility and the riskless rate.

    mu and r are per year, sigma per square-root year.
    """

    mu: float
    sigma: float
    r: float

    def __post_init__(self):
        for name in ("mu", "sigma", "r"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"market.{name} must be finite, got {v!r}")
        if self.sigma <= 0:
            raise ValueError(f"market.sigma must be > 0, got {self.sigma!r}")
        if self.mu <= self.r:
            warnings.warn(
                f"market.mu ({self.mu}) <= market.r ({self.r}): "
                "zero risk premium, optimal risky weight will be <= 0",
                stacklevel=2,
            )


@dataclass(frozen=True)
class Preferences:
    """Investor preferences and horizon.

    gamma is the curvature exponent (relative risk aversion is 1 - gamma),
    rho the utility discount rate per year, beta the habit memory weight,
    c0 the inherited consumption level, bequest_b the bequest weight, T the
    horizon in years and w0 the initial wealth.

    bequest_habit_scaled selects the alternative terminal-utility reading
    where terminal wealth is scaled by the habit denominator like a
    consumption rate; the default applies plain power utility to wealth.
    """

    gamma: float
    rho: float
    beta: float
    c0: float
    bequest_b: float
    T: float
    w0: float
    bequest_habit_scaled: bool = False

    def __post_init__(self):
        if not (self.gamma < 1.0) or self.gamma == 0.0:
            raise ValueError(
                f"preferences.gamma must be < 1 and != 0, got {self.gamma!r}"
            )
        if self.c0 <= 0:
            raise ValueError(f"preferences.c0 must be > 0, got {self.c0!r}")
        if self.beta < 0:
            raise ValueError(f"preferences.beta must be >= 0, got {self.beta!r}")
        if self.bequest_b < 0:
            raise ValueError(
                f"preferences.bequest_b must be >= 0, got {self.bequest_b!r}"
            )
        if self.T <= 0:
            raise ValueError(f"preferences.T must be > 0, got {self.T!r}")
        if self.w0 <= 0:
            raise ValueError(f"preferences.w0 must be > 0, got {self.w0!r}")
        for name in ("gamma", "rho", "beta", "c0", "bequest_b", "T", "w0"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"preferences.{name} must be finite")


@dataclass(frozen=True)
class HabitState:
    """Averaged past consumption together with the 1-based step index."""

    c_bar: float
    step_index: int

    def __post_init__(self):
        if self.c_bar < 0:
            raise ValueError(f"c_bar must be >= 0, got {self.c_bar!r}")
        if self.step_index < 1:
            raise ValueError(f"step_index must be >= 1, got {self.step_index!r}")


def crra(x: float, gamma: float) -> float:
    """One-argument power utility x**gamma / gamma."""
    if x == 0.0:
        if gamma < 0:
            raise ValueError("power utility is -inf at 0 for gamma < 0")
        return 0.0
    return x**gamma / gamma


def utility(
    c: float,
    c_bar: float,
    prefs: Preferences,
    base: Callable[[float], float] | None = None,
) -> float:
    """Satisfaction from consuming at rate c given averaged past consumption.

    Evaluates base(c / (c0 + beta * c_bar)); base defaults to power utility
    with the preference exponent, but any increasing concave one-argument
    function can be plugged in.
    """
    if c < 0:
        raise ValueError(f"consumption must be >= 0, got {c!r}")
    if c_bar < 0:
        raise ValueError(f"c_bar must be >= 0, got {c_bar!r}")
    ratio = c / (prefs.c0 + prefs.beta * c_bar)
    if base is not None:
        return base(ratio)
    return crra(ratio, prefs.gamma)


def bequest(
    w_terminal: float,
    c_bar_terminal: float,
    prefs: Preferences,
    base: Callable[[float], float] | None = None,
) -> float:
    """Discounted terminal-wealth utility b * exp(-rho*T) * U(.).

    Default reading applies the one-argument utility directly to wealth;
    with prefs.bequest_habit_scaled the wealth is first divided by the
    habit denominator c0 + beta * c_bar, like a consumption rate.
    """
    if w_terminal < 0:
        raise ValueError(f"terminal wealth must be >= 0, got {w_terminal!r}")
    if prefs.bequest_b == 0.0:
        return 0.0
    x = w_terminal
    if prefs.bequest_habit_scaled:
        x = w_terminal / (prefs.c0 + prefs.beta * c_bar_terminal)
    u = base(x) if base is not None else crra(x, prefs.gamma)
    return prefs.bequest_b * math.exp(-prefs.rho * prefs.T) * u


def habit_update(c_bar_i: float, c_i: float, step_index: int) -> float:
    """Running mean of consumption: c_i/i + ((i-1)/i) * c_bar_i.

    At step_index 1 the result is c_i regardless of c_bar_i, so the
    pre-history average never enters the dynamics.
    """
    if step_index < 1:
        raise ValueError(f"step_index must be >= 1, got {step_index!r}")
    if c_i < 0 or c_bar_i < 0:
        raise ValueError("consumption and c_bar must be >= 0")
    i = float(step_index)
    return c_i / i + (i - 1.0) / i * c_bar_i


def wealth_step(
    w_i: float,
    c_i: float,
    omega_i: float,
    z: float,
    dt: float,
    mkt: MarketParams,
) -> float:
    """One-step wealth transition under the arithmetic return model.

    Consumption c_i * dt is withdrawn up front; the remainder grows by
    1 + (1-omega)*r*dt + omega*(mu*dt + sigma*sqrt(dt)*z), floored at
    GROWTH_FLOOR so wealth stays nonnegative.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt!r}")
    if not 0.0 <= omega_i <= 1.0:
        raise ValueError(f"portfolio weight must be in [0, 1], got {omega_i!r}")
    if c_i < 0 or c_i * dt > w_i * (1 + 1e-12):
        raise ValueError(
            f"consumption rate {c_i!r} outside [0, w/dt] for wealth {w_i!r}"
        )
    w_net = max(w_i - c_i * dt, 0.0)
    growth = 1.0 + (1.0 - omega_i) * mkt.r * dt + omega_i * (
        mkt.mu * dt + mkt.sigma * math.sqrt(dt) * z
    )
    return w_net * max(growth, GROWTH_FLOOR)
