"""Numerical toolkit for linear-quadratic optimal control of mean-field
backward stochastic differential equations.

Pipeline: load a scenario, solve the two coupled quadratic terminal-value
equations, solve the auxiliary backward pair, simulate the closed-loop
forward process, and cross-verify cost, value formula and optimality
conditions by Monte Carlo.
"""

from .core import (
    CoefficientFn,
    ProblemSpec,
    SpecError,
    TerminalCondition,
    TimeGrid,
    ValidationReport,
    WeightFn,
    load_spec,
    validate_assumptions,
)
from .matode import IntegrationDivergedError, MatrixTrajectory, integrate_backward, integrate_forward, symmetrize
from .riccati import (
    KernelSingularError,
    PenalizedPair,
    RiccatiSolution,
    sigma_from_penalized,
    solve_gamma,
    solve_penalized,
    solve_riccati,
    solve_sigma,
)
from .mfbsde import (
    BackwardPair,
    ConditioningError,
    mean_phi_ode,
    solve_phi_deterministic,
    solve_phi_linear_gaussian,
    solve_phi_regression,
)
from .synthesis import (
    PathEnsemble,
    initial_x,
    mean_x_ode,
    optimal_control,
    recover_y,
    recover_z,
    simulate_x_ensemble,
    stationarity_residual,
)
from .cost import (
    CoercivityDraw,
    CostReport,
    GateauxEstimate,
    PerturbationGap,
    coercivity_check,
    control_response,
    evaluate_cost_mc,
    gateaux_derivative,
    perturbation_gap,
    quadrature_weights,
    value_function,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "SpecError", "TimeGrid", "CoefficientFn", "WeightFn", "TerminalCondition",
    "ProblemSpec", "ValidationReport", "load_spec", "validate_assumptions",
    "IntegrationDivergedError", "MatrixTrajectory", "integrate_backward",
    "integrate_forward", "symmetrize",
    "KernelSingularError", "RiccatiSolution", "PenalizedPair",
    "solve_sigma", "solve_gamma", "solve_riccati", "solve_penalized",
    "sigma_from_penalized",
    "BackwardPair", "ConditioningError", "solve_phi_deterministic",
    "solve_phi_linear_gaussian", "solve_phi_regression", "mean_phi_ode",
    "PathEnsemble", "initial_x", "mean_x_ode", "simulate_x_ensemble",
    "recover_y", "recover_z", "optimal_control", "stationarity_residual",
    "CostReport", "GateauxEstimate", "PerturbationGap", "CoercivityDraw",
    "evaluate_cost_mc", "value_function", "control_response",
    "gateaux_derivative", "perturbation_gap", "coercivity_check",
    "quadrature_weights",
]
