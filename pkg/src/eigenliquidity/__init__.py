"""Cross-impact modelling and optimal portfolio execution.

The impact matrix shares the eigenvectors of the price correlation matrix
and carries one liquidity per eigen-mode. Subpackages cover the decay
kernel, spectral tools, the model itself, cost functionals, the optimal
execution profile, calibration from market data and synthetic worlds.
"""

from .calibration import (
    CalibrationConfig,
    CalibrationError,
    CalibrationReport,
    CovariationSet,
    MarketSeries,
    compute_covariations,
    deconvolve_kernel,
    estimate_covariance_and_standardize,
    estimate_mode_liquidities,
    run_box2_pipeline,
)
from .cost import (
    ExecutionSchedule,
    eigencost,
    fragmentation_shift,
    portfolio_risk,
    round_trip_cost,
    schedule_cost,
)
from .elm import (
    PropagatorModel,
    assemble_impact_matrix,
    check_no_manipulation,
    liquidity_spectrum,
    model_from_correlation,
    two_asset_model,
)
from .errors import (
    ConfigError,
    DegenerateTargetWarning,
    EigenLiquidityError,
    InputError,
    NumericalError,
)
from .kernel import DEFAULT_KERNEL, DecayKernel, TimeGrid, build_kernel_matrix, eval_kernel
from .optimizer import (
    OptimalProfile,
    optimal_portfolio_schedule,
    profile_cost_comparison,
    solve_general_kkt,
    solve_optimal_profile,
    standard_profiles,
)
from .spectral import EigenStructure, clean_eigenvalues, decompose, eigen_portfolios
from .synthgen import (
    BiasedOrderConfig,
    WorldConfig,
    bias_cost_ratio_report,
    expected_bias_cost,
    generate_market,
    sample_biased_orders,
)

__version__ = "0.1.0"
