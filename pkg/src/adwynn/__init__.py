"""Sequential adaptive D-optimal design with least-squares verification."""

from .adaptive import (
    ReplaySource,
    Scenario,
    SimulatedSource,
    Trajectory,
    WynnConfig,
    build_initial_design,
    run,
    simulate_trajectory,
    wynn_step,
)
from .analysis import (
    MCReport,
    MassDiagnostics,
    consistency_study,
    extract_clusters,
    normality_stat,
    normality_study,
    window_mass,
)
from .design import (
    Design,
    add_point,
    d_efficiency,
    info_matrix,
    log_det,
    rank_one_update,
    sensitivity,
    solve_locally_d_optimal,
)
from .estimator import DataBatch, FitConfig, LSFit, fit_ls, sse, sse_gradient
from .model import (
    Box,
    FiniteSet,
    ModelBundle,
    ModelSpec,
    ParameterSpace,
    builtin_bundle,
    check_si_numeric,
    check_span,
    eval_f,
    eval_mu,
)
from .noise import (
    ErrorProcess,
    Heteroscedastic,
    IIDGaussian,
    IIDScaledT,
    NonAH,
    conditional_variance,
    make_error_spec,
    make_rng,
    mix_seed,
    next_error,
)

__version__ = "0.1.0"
