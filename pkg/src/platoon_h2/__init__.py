"""Structured H2 design and scaling analysis for vehicular formations."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .model import (
    ClosedLoopSystem,
    FormationSpec,
    Model,
    Stability,
    StateWeight,
    StateWeightKind,
    StructuredGain,
    assemble,
    build_cf,
    build_t,
    check_structural_stability,
    open_loop,
)
from .lyapunov import LyapunovSolver, PerformanceReport, gramians, objective_j, performance, solve_lyapunov
from .symmetric import (
    GradientSettings,
    SymmetricGainVector,
    analytic_symmetric_no_follower,
    gradient_descend,
    gradient_sg,
    objective_sg,
    optimal_symmetric_gain,
)
from .homotopy import (
    DirectionMode,
    HomotopySettings,
    HomotopyTrace,
    homotopy_continue,
    inverse_optimal_q0,
    newton_solve,
    optimal_nonsymmetric_gain,
    perturbation_first_order,
    structured_gradient,
)
from .scaling import (
    ControllerFamily,
    FamilyKind,
    FitModel,
    FitResult,
    PenaltyRule,
    SweepResult,
    closed_form_performance,
    fit_scaling,
    simulate_variance,
    sweep,
)
