"""Missing-data handling study for discrete-time linear-Gaussian state-space models."""

from .em import EmConfig, EmDiagnostics, LevelModel, em_conditional_fill, em_impute, estimate_levels
from .estimator import (
    FitOptions,
    FitResult,
    ParamVector,
    default_init,
    fit_mle,
    neg_loglik,
    neg_loglik_gradient,
    truth_values,
)
from .kalman import (
    FilterOutput,
    FilterState,
    default_init as filter_default_init,
    diffuse_init,
    filter_series,
    measurement_update,
    time_update,
)
from .metrics import (
    CellId,
    CellSummary,
    ParamDraws,
    coverage,
    median_abs_rel_bias,
    median_bias,
    summarize_cell,
)
from .mice import ImputationSet, MiceConfig, MiceVariant, PooledFit, mice_chain, pmm_impute_column, rubin_pool
from .missingness import (
    CalibrationError,
    MaskError,
    Mechanism,
    MissingnessSpec,
    apply_mcar,
    apply_mechanism,
    apply_spec,
    calibrate_intercept,
    calibrated_spec,
    mask_invariant_holds,
    missingness_probability,
    default_spec,
)
from .ssm import (
    InvalidConditionError,
    LatentTrajectory,
    MaskedSeries,
    ModelParams,
    NonStationaryError,
    make_condition,
    simulate,
    stationary_covariance,
)
from .study import FitRecord, StudyConfig, emit_tables, load_config, read_records, run_study

__all__ = [name for name in dir() if not name.startswith("_")]
