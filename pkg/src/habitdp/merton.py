"""Closed-form solution of the no-habit (beta = 0) problem.

Used as the validation oracle for the dynamic-programming solver and as the
baseline curve in every comparison run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import MarketParams, Preferences

# Below this |nu| the consumption formula is evaluated by its series
# expansion; the direct expression loses precision to cancellation.
NU_SERIES_THRESHOLD = 1e-8


@dataclass(frozen=True)
class MertonSolution:
    """Constant-coefficient optimal policy of the no-habit problem.

    nu is the consumption-rate coefficient per year; omega_star the constant
    optimal risky weight, reported unclamped.
    """

    nu: float
    omega_star: float

    @property
    def omega_star_clamped(self) -> float:
        """Risky weight clamped to [0, 1] for comparison with the
        box-constrained numerical solver."""
        return min(max(self.omega_star, 0.0), 1.0)


def merton_solve(mkt: MarketParams, prefs: Preferences) -> MertonSolution:
    """Closed-form consumption coefficient and risky weight.

    omega_star = (mu - r) / (sigma^2 * (1 - gamma))
    nu = (rho - gamma * (r + (mu - r)^2 / (2 sigma^2 (1 - gamma)))) / (1 - gamma)

    The habit memory parameter is ignored (treated as 0).
    """
    g = prefs.gamma
    excess = mkt.mu - mkt.r
    omega_star = excess / (mkt.sigma**2 * (1.0 - g))
    nu = (prefs.rho - g * (mkt.r + excess**2 / (2.0 * mkt.sigma**2 * (1.0 - g)))) / (
        1.0 - g
    )
    return MertonSolution(nu=nu, omega_star=omega_star)


def merton_consumption(t: float, w: float, sol: MertonSolution, T: float) -> float:
    """Optimal consumption rate nu * w / (1 - exp(-nu * (T - t))).

    Near nu = 0 the removable singularity is evaluated by the second-order
    series w/(T-t) * (1 + nu*(T-t)/2).
    """
    if t >= T:
        raise ValueError(f"t must be < T, got t={t!r}, T={T!r}")
    if w < 0:
        raise ValueError(f"wealth must be >= 0, got {w!r}")
    tau = T - t
    if abs(sol.nu) < NU_SERIES_THRESHOLD:
        return w / tau * (1.0 + sol.nu * tau / 2.0)
    return sol.nu * w / (1.0 - math.exp(-sol.nu * tau))
