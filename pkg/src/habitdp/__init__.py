"""Lifetime consumption and portfolio choice under habit-formation utility.

Solves the discrete-time control problem by backward dynamic programming on
a (time, wealth, habit-average) grid, validates against the closed-form
no-habit solution, and reproduces the experiment suite by seeded forward
Monte Carlo.
"""

from .model import (
    GROWTH_FLOOR,
    HabitState,
    MarketParams,
    Preferences,
    bequest,
    crra,
    habit_update,
    utility,
    wealth_step,
)
from .merton import MertonSolution, merton_consumption, merton_solve
from .dp import (
    GridEscapeDiagnostics,
    GridSpec,
    PolicyTable,
    QuadratureRule,
    ValueTable,
    backward_solve,
    build_grids,
    check_value_monotone,
    expected_continuation,
    generic_backward_solve,
    interp2,
    optimize_node,
    policy_lookup,
)
from .sim import (
    CalibrationResult,
    EnsembleStats,
    SimPath,
    WealthCurve,
    calibrate_bequest,
    consumption_sensitivity,
    simulate_ensemble,
    simulate_path,
    wealth_parametrize,
)

__version__ = "0.1.0"
