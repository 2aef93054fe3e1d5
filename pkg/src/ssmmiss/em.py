"""Single-imputation EM with pluggable level (mean) models.

Each iteration re-estimates a per-column mean series on the completed working
copy, takes the residual covariance MLE, and replaces missing entries with
Gaussian conditional means. This deliberately omits the conditional-variance
correction a full EM would add, matching the reference approach whose
shrinkage behavior the study measures downstream.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ssm import MaskedSeries

MIN_OBSERVED_PER_COLUMN = 10


class LevelModel(str, enum.Enum):
    ARIMA = "arima"
    SPLINE = "spline"
    REGRESSION = "regression"


@dataclass(frozen=True)
class EmConfig:
    level_model: LevelModel
    max_iter: int = 100
    tol: float = 1e-4
    arima_order: tuple[int, int, int] = (1, 0, 0)
    spline_df: int | None = None  # None -> one basis function per ~5 days

    def __post_init__(self):
        object.__setattr__(self, "level_model", LevelModel(self.level_model))
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        p, d, q = self.arima_order
        if p < 1 or d < 0 or q < 0:
            raise ValueError("arima_order components must be nonnegative with p >= 1")
        if q != 0:
            raise ValueError("moving-average terms are not supported; use q = 0")
        if d > 1:
            raise ValueError("differencing order above 1 is not supported")
        if self.spline_df is not None and self.spline_df < 1:
            raise ValueError("spline_df must be >= 1")


@dataclass
class EmDiagnostics:
    iterations: int
    final_change: float
    converged: bool
    objective_path: list[float] = field(default_factory=list)


def default_spline_df(T: int) -> int:
    """Roughly one basis function per five days of ten beeps."""
    n_days = int(np.ceil(T / 10))
    return max(1, round(2 * n_days / 10))


_BASIS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _natural_spline_basis(n: int, df: int) -> np.ndarray:
    """Natural cubic spline design on 0..n-1 with df functions plus intercept.

    Truncated-power construction with linear tails; knots (df + 1 of them,
    boundary included) sit at uniform quantiles of the time index.
    """
    key = (n, df)
    cached = _BASIS_CACHE.get(key)
    if cached is not None:
        return cached
    x = np.arange(n, dtype=float) / max(n - 1, 1)
    cols = [np.ones(n), x]
    if df >= 2:
        knots = np.unique(np.quantile(x, np.linspace(0.0, 1.0, df + 1)))
        K = knots.size

        def basis_d(k: int) -> np.ndarray:
            num = np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - knots[-1], 0.0) ** 3
            return num / (knots[-1] - knots[k])

        d_last = basis_d(K - 2)
        for k in range(K - 2):
            cols.append(basis_d(k) - d_last)
    B = np.column_stack(cols[: df + 1])
    B.setflags(write=False)
    _BASIS_CACHE[key] = B
    return B


def _ar_one_step(col: np.ndarray, order: tuple[int, int, int]) -> np.ndarray:
    """In-sample one-step-ahead predictions from a conditional-least-squares AR."""
    p, d, _ = order
    x = np.asarray(col, dtype=float)
    y = np.diff(x) if d == 1 else x
    n = y.size
    if n <= p + 2:
        return np.full(x.size, float(np.mean(x)))
    design = np.column_stack([np.ones(n - p)] + [y[p - k : n - k] for k in range(1, p + 1)])
    beta, *_ = np.linalg.lstsq(design, y[p:], rcond=None)
    phi_sum = float(np.sum(beta[1:]))
    mean_y = float(beta[0] / (1.0 - phi_sum)) if abs(1.0 - phi_sum) > 1e-8 else float(np.mean(y))
    preds_y = np.empty(n)
    preds_y[:p] = mean_y
    preds_y[p:] = design @ beta
    if d == 0:
        return preds_y
    out = np.empty(x.size)
    out[0] = float(np.mean(x))
    out[1:] = x[:-1] + preds_y
    return out


def estimate_levels(z_completed: np.ndarray, config: EmConfig) -> np.ndarray:
    """Per-column mean series on a completed matrix."""
    z = np.asarray(z_completed, dtype=float)
    if np.any(~np.isfinite(z)):
        raise ValueError("level estimation requires a completed matrix")
    T, l = z.shape
    mu = np.empty_like(z)

    if config.level_model is LevelModel.ARIMA:
        for j in range(l):
            mu[:, j] = _ar_one_step(z[:, j], config.arima_order)
        return mu

    if config.level_model is LevelModel.SPLINE:
        df = config.spline_df if config.spline_df is not None else default_spline_df(T)
        B = _natural_spline_basis(T, df)
        coef, *_ = np.linalg.lstsq(B, z, rcond=None)
        return B @ coef

    t_norm = np.arange(T, dtype=float) / max(T - 1, 1)
    for j in range(l):
        others = np.delete(z, j, axis=1)
        design = np.column_stack([np.ones(T), t_norm, others])
        coef, _, rank, _ = np.linalg.lstsq(design, z[:, j], rcond=None)
        if rank < design.shape[1]:
            warnings.warn(
                f"singular regression design for column {j + 1}; falling back to the column mean",
                UserWarning,
                stacklevel=2,
            )
            mu[:, j] = np.mean(z[:, j])
        else:
            mu[:, j] = design @ coef
    return mu


def em_conditional_fill(
    z_row: np.ndarray,
    mask_row: np.ndarray,
    mu_row: np.ndarray,
    sigma: np.ndarray,
) -> np.ndarray:
    """Replace masked entries with the Gaussian conditional mean."""
    z_row = np.asarray(z_row, dtype=float)
    mis = np.asarray(mask_row, dtype=bool)
    out = z_row.copy()
    if not np.any(mis):
        return out
    obs = ~mis
    if not np.any(obs):
        out[mis] = mu_row[mis]
        return out
    S_oo = sigma[np.ix_(obs, obs)]
    S_mo = sigma[np.ix_(mis, obs)]
    resid = z_row[obs] - mu_row[obs]
    try:
        sol = np.linalg.solve(S_oo, resid)
    except np.linalg.LinAlgError:
        warnings.warn("singular observed covariance block; adding ridge", UserWarning, stacklevel=2)
        sol = np.linalg.solve(S_oo + 1e-8 * np.eye(S_oo.shape[0]), resid)
    out[mis] = mu_row[mis] + S_mo @ sol
    return out


def _observed_quasi_loglik(z, mask, mu, sigma) -> float:
    """Gaussian log-density of the observed entries under (mu, sigma)."""
    total = 0.0
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    for pi, pattern in enumerate(patterns):
        obs = ~pattern
        n_obs = int(np.sum(obs))
        if n_obs == 0:
            continue
        rows = np.flatnonzero(inverse == pi)
        S_oo = sigma[np.ix_(obs, obs)]
        sign, logdet = np.linalg.slogdet(S_oo)
        if sign <= 0:
            return -np.inf
        resid = z[np.ix_(rows, np.flatnonzero(obs))] - mu[np.ix_(rows, np.flatnonzero(obs))]
        quad = np.sum(resid * np.linalg.solve(S_oo, resid.T).T)
        total += -0.5 * (rows.size * (n_obs * np.log(2 * np.pi) + logdet) + quad)
    return float(total)


def em_impute(series: MaskedSeries, config: EmConfig) -> tuple[np.ndarray, EmDiagnostics]:
    """Iterative conditional-mean fill; observed entries are never modified."""
    z = series.z
    mask = series.mask
    T, l = z.shape
    n_obs = np.sum(~mask, axis=0)
    if np.any(n_obs < MIN_OBSERVED_PER_COLUMN):
        raise ValueError(
            f"every column needs >= {MIN_OBSERVED_PER_COLUMN} observed values, got {n_obs.tolist()}"
        )

    working = z.copy()
    for j in range(l):
        working[mask[:, j], j] = np.mean(z[~mask[:, j], j])
    if not np.any(mask):
        mu = estimate_levels(working, config)
        sigma = (working - mu).T @ (working - mu) / T
        obj = _observed_quasi_loglik(z, mask, mu, sigma)
        return working, EmDiagnostics(1, 0.0, True, [obj])

    masked_rows = np.flatnonzero(np.any(mask, axis=1))
    patterns, inverse = np.unique(mask[masked_rows], axis=0, return_inverse=True)

    diagnostics = EmDiagnostics(0, np.inf, False)
    for it in range(1, config.max_iter + 1):
        mu = estimate_levels(working, config)
        resid = working - mu
        sigma = resid.T @ resid / T
        diagnostics.objective_path.append(_observed_quasi_loglik(z, mask, mu, sigma))

        new_working = working.copy()
        for pi, pattern in enumerate(patterns):
            rows = masked_rows[inverse == pi]
            obs = np.flatnonzero(~pattern)
            mis = np.flatnonzero(pattern)
            if obs.size == 0:
                new_working[np.ix_(rows, mis)] = mu[np.ix_(rows, mis)]
                continue
            S_oo = sigma[np.ix_(obs, obs)]
            S_mo = sigma[np.ix_(mis, obs)]
            r = working[np.ix_(rows, obs)] - mu[np.ix_(rows, obs)]
            try:
                sol = np.linalg.solve(S_oo, r.T).T
            except np.linalg.LinAlgError:
                warnings.warn(
                    "singular observed covariance block; adding ridge", UserWarning, stacklevel=2
                )
                sol = np.linalg.solve(S_oo + 1e-8 * np.eye(obs.size), r.T).T
            new_working[np.ix_(rows, mis)] = mu[np.ix_(rows, mis)] + sol @ S_mo.T

        change = float(np.max(np.abs(new_working[mask] - working[mask])))
        working = new_working
        diagnostics.iterations = it
        diagnostics.final_change = change
        if change < config.tol:
            diagnostics.converged = True
            break
    return working, diagnostics
