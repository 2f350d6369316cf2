"""Local volatility calibration from option prices.

Calibrates the diffusion surface a = sigma^2/2 of the Dupire forward equation
from (noisy, gridded) European call prices by Tikhonov regularization, with
discrepancy principles selecting both the regularization weight and the
parameter-mesh resolution.
"""

from .adjoint import (
    MisfitGradient,
    adjoint_apply,
    check_lipschitz_derivative,
    check_tangential_cone,
    directional_derivative,
    misfit_gradient,
)
from .calibrate import (
    ArmijoParams,
    BetaGrid,
    CalibrationConfig,
    CalibrationResult,
    LevelDiagnostics,
    minimize_tikhonov,
    select_beta_morozov,
    select_mesh_level,
)
from .dupire import (
    DiffusionBounds,
    MarketParams,
    dupire_inversion,
    forward_operator,
    payoff,
    solve_dupire,
)
from .errors import (
    DegeneratePairError,
    InsufficientDataError,
    InvalidInputError,
    LocalVolError,
    NumericalFailureError,
    PriceBoundError,
    QuoteFormatError,
)
from .experiments import (
    NoiseSpec,
    SyntheticSetup,
    default_mesh_ladder,
    make_synthetic_data,
    measure_rho,
    run_mesh_sweep,
    run_rate_study,
    true_volatility,
)
from .grids import (
    Grid,
    MeshHierarchy,
    MeshLevel,
    Surface,
    constant_surface,
    h1_norm,
    h1_norm_sq,
    l2_inner,
    l2_norm,
    load_surface,
    project,
    prolongate,
    restrict_measure_gamma,
    save_surface,
    surface_from_function,
)
from .market import (
    OptionQuote,
    QuoteSet,
    implied_vol,
    load_quotes,
    to_grid_surface,
    validate_calibration,
)
from .penalties import (
    BoltzmannShannonEntropy,
    FiniteModesPenalty,
    H1Penalty,
    KullbackLeiblerPenalty,
    L2Penalty,
    Penalty,
    entropy,
    make_penalty,
)

__version__ = "0.1.0"
