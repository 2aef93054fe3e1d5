"""Kalman filtering with missing observations.

Fully masked timepoints skip the measurement update and carry the time-update
prediction forward, which is the state-level handling of missing data used as
the baseline method. The log-likelihood sums the Gaussian log-density of the
observed components only, so it doubles as the fitting objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .ssm import MaskedSeries, ModelParams, stationary_covariance

SYM_TOL = 1e-10


class SingularInnovationError(RuntimeError):
    pass


@dataclass
class FilterState:
    """State mean and covariance; P is kept symmetric to SYM_TOL."""

    x: np.ndarray  # (p,)
    P: np.ndarray  # (p, p)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        if np.max(np.abs(self.P - self.P.T)) > 1e-8:
            raise ValueError("P must be symmetric")
        self.P = 0.5 * (self.P + self.P.T)


@dataclass
class FilterOutput:
    filtered_means: np.ndarray   # (T, p)
    filtered_covs: np.ndarray    # (T, p, p)
    predicted_means: np.ndarray  # (T, p)
    predicted_covs: np.ndarray   # (T, p, p)
    loglik: float


def default_init(params: ModelParams) -> FilterState:
    """Zero mean with the stationary covariance (the model is stationary)."""
    return FilterState(np.zeros(params.n_states), stationary_covariance(params))


def diffuse_init(params: ModelParams, scale: float = 1e7) -> FilterState:
    """Large isotropic prior, for parity with common state-space software."""
    return FilterState(np.zeros(params.n_states), scale * np.eye(params.n_states))


def time_update(state: FilterState, params: ModelParams) -> FilterState:
    """Propagate one step: x -> A x, P -> A P A' + Q."""
    x = params.A @ state.x
    P = params.A @ state.P @ params.A.T + params.Q
    return FilterState(x, 0.5 * (P + P.T))


def measurement_update(
    state: FilterState,
    z_row: np.ndarray,
    mask_row: np.ndarray,
    params: ModelParams,
) -> tuple[FilterState, float]:
    """Condition a predicted state on the observed entries of one row.

    Returns the updated state and the log-density increment of the observed
    entries. A fully masked row returns the state unchanged with increment 0.
    Joseph-stabilized covariance form.
    """
    mask_row = np.asarray(mask_row, dtype=bool)
    obs = ~mask_row
    if not np.any(obs):
        return FilterState(state.x.copy(), state.P.copy()), 0.0

    H = params.H[obs]
    r = np.diag(params.R)[obs]
    v = np.asarray(z_row, dtype=float)[obs] - H @ state.x
    S = H @ state.P @ H.T + np.diag(r)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError("innovation covariance is not positive definite") from exc

    alpha = np.linalg.solve(L, v)
    n = int(np.sum(obs))
    increment = -0.5 * (n * _kernels.LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + alpha @ alpha)

    K = state.P @ H.T @ np.linalg.solve(L.T, np.linalg.solve(L, np.eye(n)))
    x = state.x + K @ v
    IKH = np.eye(params.n_states) - K @ H
    P = IKH @ state.P @ IKH.T + K @ np.diag(r) @ K.T
    return FilterState(x, 0.5 * (P + P.T)), float(increment)


def filter_series(
    series: MaskedSeries,
    params: ModelParams,
    init: FilterState | None = None,
) -> FilterOutput:
    """Run the filter over a series; `init` is the prior for the first row.

    Predicted states at fully masked timepoints are the state-level
    imputation; loglik is the sum of per-step observed-component densities.
    """
    if series.n_timepoints < 1:
        raise ValueError("series must contain at least one timepoint")
    if init is None:
        init = default_init(params)
    pred_m, pred_P, filt_m, filt_P, ll, status = _kernels.kalman_filter(
        np.ascontiguousarray(params.A),
        np.ascontiguousarray(params.H),
        np.ascontiguousarray(params.Q),
        np.ascontiguousarray(np.diag(params.R)),
        np.ascontiguousarray(series.z),
        np.ascontiguousarray(series.mask),
        np.ascontiguousarray(init.x),
        np.ascontiguousarray(init.P),
    )
    if status == _kernels.STATUS_SINGULAR_INNOVATION:
        raise SingularInnovationError("innovation covariance is not positive definite")
    return FilterOutput(
        filtered_means=filt_m,
        filtered_covs=filt_P,
        predicted_means=pred_m,
        predicted_covs=pred_P,
        loglik=float(ll),
    )
