"""Optimal debt-ratio reduction under a hidden economic regime.

Pipeline: simulate the hidden-regime system, filter the regime from the
observable debt ratio and macro indicator, solve the auxiliary
two-dimensional stopping problem for the belief-dependent debt ceiling, and
evaluate the reflection policy by Monte Carlo against the gridded value.
"""

from .coefficients import (
    CostFunction,
    IndicatorCoefficients,
    arithmetic_indicator,
    constant_jumps,
    geometric_indicator,
    power_cost,
    quadratic_cost,
    zero_jumps,
)
from .config import ScenarioConfig, benchmark_config, config_from_dict, load_config
from .control import (
    ConstantCeiling,
    ControlValueSurface,
    CostEstimate,
    DoNothing,
    PolicyOutcome,
    ReflectAtBoundary,
    evaluate_cost,
    full_reduction,
    hjb_residual,
    reflect_policy_simulate,
    suggest_horizon,
    value_consistency_check,
    value_from_stopping,
    vyy_formula,
)
from .errors import (
    BoundaryNotFound,
    DebtCeilingError,
    DegenerateSigma2,
    DegenerateTheta,
    DiscountTooSmall,
    ModelValidationError,
    NoConvergence,
    NonConservativeGenerator,
    NonConvexCost,
    NoRoot,
    NotTwoRegime,
    ResolutionTooCoarse,
    StepTooCoarse,
    UnmatchableJump,
    WeightCollapse,
)
from .filtering import (
    FilterPath,
    FilterState,
    InnovationIncrements,
    Observations,
    innovations_from_observations,
    ks_jump_update,
    ks_step_general,
    ks_step_two_regime,
    particle_filter_oracle,
    run_filter,
    simulate_filter_ensemble,
)
from .model import (
    GeneratorMatrix,
    ModelParams,
    RegimePath,
    SamplePath,
    alpha_fn,
    path_rng,
    rho_floor,
    simulate_regime,
    simulate_uncontrolled,
    validate_params,
)
from .stopping import (
    FreeBoundary,
    Grid2D,
    OneDimBounds,
    SmoothFitReport,
    ValueSurface,
    build_grid,
    extract_boundary,
    generator_apply,
    one_dim_bounds,
    smooth_fit_report,
    solve_variational_inequality,
    zeta_lower,
)

__version__ = "0.1.0"
