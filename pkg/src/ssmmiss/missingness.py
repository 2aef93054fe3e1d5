"""Missingness mechanisms masking the first indicator block.

All mechanisms mask indicators 1-3 jointly (all direct information about
state 1 removed); indicators 4-6 are never masked. The stochastic mechanisms
share one logistic form for the per-timepoint missingness probability,

    p(miss at t) = 1 / (1 + exp(beta0 + slope * driver_t)),

differing only in the driver: state 2 (MAR), beep-within-day (TMAR), the
previous state-1 value (ATMAR) or the current one (MNAR). Note the sign
convention: a negative slope makes missingness *increase* with the driver.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .ssm import MaskedSeries, ModelParams, simulate

MASKED_COLUMNS = (0, 1, 2)
CALIBRATION_TIMEPOINTS = 200_000
CALIBRATION_RATE_TOL = 0.005


class Mechanism(str, enum.Enum):
    MCAR = "MCAR"
    MAR = "MAR"
    TMAR = "TMAR"
    ATMAR = "ATMAR"
    MNAR = "MNAR"


# Default (beta0, slope) pairs keyed by target rate.
DEFAULT_BETAS: dict[Mechanism, dict[float, tuple[float, float]]] = {
    Mechanism.MAR: {0.15: (4.0, -3.5), 0.30: (1.5, -3.0)},
    Mechanism.TMAR: {0.15: (3.0, -0.2), 0.30: (2.0, -0.2)},
    Mechanism.ATMAR: {0.15: (4.0, -3.5), 0.30: (1.5, -3.0)},
    Mechanism.MNAR: {0.15: (4.0, -3.5), 0.30: (1.5, -3.0)},
}


class MaskError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MissingnessSpec:
    mechanism: Mechanism
    target_rate: float
    beta0: float = 0.0
    beta_slope: float = 0.0
    calibrated: bool = False

    def __post_init__(self):
        if not 0.0 < self.target_rate < 1.0:
            raise ValueError("target_rate must be in (0, 1)")


def default_spec(mechanism: Mechanism, target_rate: float) -> MissingnessSpec:
    """Spec preloaded with the default beta values for a target rate."""
    mechanism = Mechanism(mechanism)
    if mechanism is Mechanism.MCAR:
        return MissingnessSpec(mechanism=mechanism, target_rate=target_rate)
    table = DEFAULT_BETAS[mechanism]
    for rate, (beta0, slope) in table.items():
        if np.isclose(rate, target_rate):
            return MissingnessSpec(mechanism, target_rate, beta0, slope)
    raise ValueError(f"no default betas for {mechanism.value} at rate {target_rate}")


def missingness_probability(spec: MissingnessSpec, driver_value: float) -> float:
    """Logistic missingness probability for one driver value."""
    if spec.mechanism is Mechanism.MCAR:
        raise MaskError("MCAR has no probability model; use apply_mcar")
    arg = spec.beta0 + spec.beta_slope * driver_value
    with np.errstate(over="ignore"):
        return float(1.0 / (1.0 + np.exp(arg)))


def _require_fresh(series: MaskedSeries):
    if np.any(series.mask):
        raise MaskError("input series is already masked; mechanisms are not composable")


def _mask_rows(series: MaskedSeries, rows: np.ndarray) -> MaskedSeries:
    out = series.copy()
    for c in MASKED_COLUMNS:
        out.mask[rows, c] = True
    return out


def apply_mcar(series: MaskedSeries, rate: float, seed) -> MaskedSeries:
    """Mask exactly round(rate * T) uniformly chosen timepoints."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must be in [0, 1)")
    _require_fresh(series)
    T = series.n_timepoints
    n_mask = int(round(rate * T))
    rng = np.random.default_rng(seed)
    rows = rng.choice(T, size=n_mask, replace=False)
    return _mask_rows(series, rows)


def _driver_values(series: MaskedSeries, mechanism: Mechanism) -> np.ndarray:
    """Per-timepoint driver; NaN marks timepoints that can never be masked."""
    if series.truth is None:
        raise MaskError("mechanism requires the latent ground truth")
    x = series.truth.x
    if mechanism is Mechanism.MAR:
        return x[:, 1].copy()
    if mechanism is Mechanism.TMAR:
        return series.day_index.astype(float)
    if mechanism is Mechanism.ATMAR:
        d = np.empty(series.n_timepoints)
        d[0] = np.nan  # no predecessor; t = 1 is never masked
        d[1:] = x[:-1, 0]
        return d
    if mechanism is Mechanism.MNAR:
        return x[:, 0].copy()
    raise MaskError(f"no driver for mechanism {mechanism}")


def apply_mechanism(series: MaskedSeries, spec: MissingnessSpec, seed) -> MaskedSeries:
    """Bernoulli masking with the spec's logistic probability per timepoint."""
    if spec.mechanism is Mechanism.MCAR:
        raise MaskError("use apply_mcar for MCAR")
    _require_fresh(series)
    d = _driver_values(series, spec.mechanism)
    with np.errstate(over="ignore"):
        probs = 1.0 / (1.0 + np.exp(spec.beta0 + spec.beta_slope * d))
    probs = np.where(np.isnan(d), 0.0, probs)
    rng = np.random.default_rng(seed)
    rows = np.flatnonzero(rng.random(series.n_timepoints) < probs)
    return _mask_rows(series, rows)


def calibrate_intercept(
    mechanism: Mechanism,
    params: ModelParams,
    target_rate: float,
    slope: float,
    seed,
    n_timepoints: int = CALIBRATION_TIMEPOINTS,
    rate_tol: float = CALIBRATION_RATE_TOL,
) -> float:
    """Bisect on the intercept until the marginal masking rate hits target.

    The marginal rate is the mean logistic probability over one long simulated
    driver trajectory (its Bernoulli expectation), which is monotone
    decreasing in beta0, so bisection is exact up to the rate tolerance.
    """
    mechanism = Mechanism(mechanism)
    if mechanism is Mechanism.MCAR:
        raise MaskError("MCAR hits its rate exactly and needs no calibration")
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must be in (0, 1)")

    series = simulate(params, n_timepoints, seed=seed, burn_in=100)
    d = _driver_values(series, mechanism)
    d = d[~np.isnan(d)]

    def rate_at(beta0: float) -> float:
        with np.errstate(over="ignore"):
            return float(np.mean(1.0 / (1.0 + np.exp(beta0 + slope * d))))

    lo, hi = -60.0, 60.0
    r_lo, r_hi = rate_at(lo), rate_at(hi)
    if not (r_hi <= target_rate <= r_lo):
        raise CalibrationError(
            f"target rate {target_rate} not bracketed: achievable range "
            f"[{r_hi:.4f}, {r_lo:.4f}] for {mechanism.value} with slope {slope}"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = rate_at(mid)
        if abs(r - target_rate) <= rate_tol:
            return mid
        if r > target_rate:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("bisection failed to converge")


def calibrated_spec(
    mechanism: Mechanism,
    params: ModelParams,
    target_rate: float,
    seed,
    slope: float | None = None,
) -> MissingnessSpec:
    """Default spec with the intercept re-calibrated for the given condition."""
    mechanism = Mechanism(mechanism)
    if mechanism is Mechanism.MCAR:
        return MissingnessSpec(mechanism=mechanism, target_rate=target_rate, calibrated=True)
    base = default_spec(mechanism, target_rate)
    if slope is None:
        slope = base.beta_slope
    beta0 = calibrate_intercept(mechanism, params, target_rate, slope, seed)
    return replace(base, beta0=beta0, beta_slope=slope, calibrated=True)


def apply_spec(series: MaskedSeries, spec: MissingnessSpec, seed) -> MaskedSeries:
    """Dispatch to the right masking routine for the spec's mechanism."""
    if spec.mechanism is Mechanism.MCAR:
        return apply_mcar(series, spec.target_rate, seed)
    return apply_mechanism(series, spec, seed)


def mask_invariant_holds(series: MaskedSeries) -> bool:
    """Columns 1-3 masked all-or-none per row; columns 4-6 never masked."""
    block = series.mask[:, list(MASKED_COLUMNS)]
    rest = np.delete(series.mask, list(MASKED_COLUMNS), axis=1)
    all_or_none = np.all(np.all(block, axis=1) | ~np.any(block, axis=1))
    return bool(all_or_none and not np.any(rest))
