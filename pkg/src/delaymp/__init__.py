"""Numerical toolkit for stochastic optimal control with pointwise delay.

Forward Euler-Maruyama simulation of controlled stochastic differential delay
equations, spike-variation expansions, regression-based solvers for the
anticipated backward adjoint equations, maximum-principle gap verification,
and a delayed linear-quadratic solver with a non-convex control domain.
"""

__version__ = "0.1.0"

from .adjoint import (
    CrossTermAux,
    CrossTermReport,
    FirstAdjointPaths,
    RegressionBasis,
    SecondAdjointPaths,
    build_cross_term_aux,
    cross_term_check,
    duality_gap,
    hamiltonian_cross_weight,
    simulate_P0,
    solve_first_adjoint,
    solve_first_adjoint_no_state_delay,
    solve_second_adjoint,
    solve_second_adjoint_no_state_delay,
)
from .errors import (
    ConfigurationError,
    DelaympError,
    DomainError,
    EvaluationError,
    OracleError,
    SimulationError,
    SolverError,
    StructureError,
)
from .forward import (
    CostEstimate,
    ExpansionStudy,
    SpikeSpec,
    StatePaths,
    VariationPaths,
    apply_spike,
    evaluate_cost,
    expansion_residual,
    expansion_study,
    loglog_slope,
    simulate_first_variation,
    simulate_second_variation,
    simulate_state,
    simulate_variations,
    variational_inequality_lhs,
)
from .grid import NoiseEnsemble, TimeGrid, make_grid, sample_noise
from .lq import (
    LQProblem,
    LQSolution,
    OptimalityReport,
    PicardConfig,
    RiccatiReference,
    build_lq_spec,
    lq_candidate_control,
    lq_coefficients,
    riccati_reference,
    solve_lq,
    verify_optimality,
)
from .model import (
    UNIT_GAP_DOMAIN,
    CoefficientSet,
    ControlDomain,
    ControlPath,
    DerivativeReport,
    ProblemSpec,
    ThetaValues,
    check_derivatives,
    constant_control,
    control_from_feedback,
    project_to_domain,
    theta_eval,
)
from .mp import (
    GapEstimate,
    MPGapReport,
    hamiltonian,
    mp_gap,
    mp_gap_case2,
    mp_scan,
    mp_scan_cells,
)
from .problems import BENCHMARK, NODELAY_REDUCTION, ProblemBundle, build_problem
