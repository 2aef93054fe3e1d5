"""Chained-equation multiple imputation with predictive mean matching.

Chained equations impute one column at a time using every other column as a
predictor, co-missing columns entering through their current working values
(the reference software's default). The Def variant uses the five other
columns at the same timepoint; the Lag1 variant appends lagged copies of the
fully observed columns (incomplete columns have no usable lagged copy).
Because the three first-block columns are always missing together, the
default predictor set makes their imputations lean on each other across
sweeps; this circularity preserves cross-sectional but not temporal structure
and is what the downstream fits react to. Every imputed value is an observed
donor value of its own column.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .estimator import FitResult
from .ssm import MaskedSeries

MIN_OBSERVED = 10


class MiceVariant(str, enum.Enum):
    DEF = "def"
    LAG1 = "lag1"


@dataclass(frozen=True)
class MiceConfig:
    variant: MiceVariant
    m: int = 10
    chain_iters: int = 5
    donors: int = 5

    def __post_init__(self):
        object.__setattr__(self, "variant", MiceVariant(self.variant))
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.chain_iters < 1:
            raise ValueError("chain_iters must be >= 1")
        if self.donors < 1:
            raise ValueError("donors must be >= 1")


@dataclass
class ImputationSet:
    datasets: np.ndarray  # (m, T, l)
    seeds: list[int]


@dataclass
class PooledFit:
    q_bar: dict[str, float]
    t_var: dict[str, float]
    u_bar: dict[str, float]
    b_m: dict[str, float]
    m: int
    missing_se: tuple[str, ...] = ()


def pmm_impute_column(
    y_obs: np.ndarray,
    X_obs: np.ndarray,
    X_mis: np.ndarray,
    donors: int,
    rng: np.random.Generator,
    posterior_draw: bool = True,
) -> np.ndarray:
    """Type-1 predictive mean matching for one column.

    Fits a Bayesian linear regression (an intercept is added internally),
    draws (sigma2, beta) from the posterior, computes |X_obs b_hat - X_mis
    b_dot| distances and imputes each missing case with the observed y of a
    donor picked uniformly among the `donors` nearest. `posterior_draw=False`
    pins b_dot to b_hat, which makes the matching deterministic for donors=1.
    """
    y_obs = np.asarray(y_obs, dtype=float)
    X_obs = np.atleast_2d(np.asarray(X_obs, dtype=float))
    X_mis = np.atleast_2d(np.asarray(X_mis, dtype=float))
    n = y_obs.size
    if X_obs.shape[0] != n:
        raise ValueError("X_obs rows must match y_obs")
    q = X_obs.shape[1] + 1
    if n <= q + 2:
        raise ValueError(f"need more than {q + 2} observed cases, got {n}")

    Xo = np.column_stack([np.ones(n), X_obs])
    Xm = np.column_stack([np.ones(X_mis.shape[0]), X_mis])
    gram = Xo.T @ Xo
    try:
        V = np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        warnings.warn("rank-deficient predictors; adding ridge", UserWarning, stacklevel=2)
        V = np.linalg.inv(gram + 1e-6 * np.eye(q))
    beta_hat = V @ Xo.T @ y_obs

    if posterior_draw:
        resid = y_obs - Xo @ beta_hat
        df = n - q
        sigma2_dot = float(resid @ resid) / rng.chisquare(df)
        try:
            V_chol = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            w, U = np.linalg.eigh(0.5 * (V + V.T))
            V_chol = U @ np.diag(np.sqrt(np.maximum(w, 0.0)))
        beta_dot = beta_hat + np.sqrt(sigma2_dot) * V_chol @ rng.standard_normal(q)
    else:
        beta_dot = beta_hat

    yhat_obs = Xo @ beta_hat
    yhat_mis = Xm @ beta_dot

    d = min(donors, n)
    dist = np.abs(yhat_obs[:, None] - yhat_mis[None, :])
    nearest = np.argpartition(dist, d - 1, axis=0)[:d]
    picks = nearest[rng.integers(0, d, size=yhat_mis.size), np.arange(yhat_mis.size)]
    return y_obs[picks]


def _lagged_predictors(working: np.ndarray, columns: list[int]) -> np.ndarray:
    """Selected columns at t-1; the first row falls back to column means."""
    block = working[:, columns]
    lagged = np.empty_like(block)
    lagged[0] = np.mean(block, axis=0)
    lagged[1:] = block[:-1]
    return lagged


def mice_chain(series: MaskedSeries, config: MiceConfig, seed) -> ImputationSet:
    """m independent chained-equation imputations of the masked columns."""
    z = series.z
    mask = series.mask
    T, l = z.shape
    if np.any(mask[:, 3:]):
        raise ValueError("columns 4-6 must be fully observed")
    target_cols = [j for j in range(l) if np.any(mask[:, j])]
    for j in range(l):
        if np.sum(~mask[:, j]) < MIN_OBSERVED:
            raise ValueError(f"column {j + 1} has fewer than {MIN_OBSERVED} observed values")

    complete_cols = [j for j in range(l) if not np.any(mask[:, j])]
    root = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    children = root.spawn(config.m)
    datasets = np.empty((config.m, T, l))

    for idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        working = z.copy()
        for j in target_cols:
            obs_vals = z[~mask[:, j], j]
            n_mis = int(np.sum(mask[:, j]))
            working[mask[:, j], j] = rng.choice(obs_vals, size=n_mis, replace=True)

        for _ in range(config.chain_iters):
            if not target_cols:
                break
            for j in target_cols:
                others = [c for c in range(l) if c != j]
                predictors = working[:, others]
                if config.variant is MiceVariant.LAG1:
                    predictors = np.column_stack(
                        [predictors, _lagged_predictors(working, complete_cols)]
                    )
                mis = mask[:, j]
                working[mis, j] = pmm_impute_column(
                    y_obs=z[~mis, j],
                    X_obs=predictors[~mis],
                    X_mis=predictors[mis],
                    donors=config.donors,
                    rng=rng,
                )
        datasets[idx] = working

    return ImputationSet(datasets=datasets, seeds=[int(c.generate_state(1)[0]) for c in children])


def rubin_pool(fits: list[FitResult]) -> PooledFit:
    """Combine repeated-imputation fits: Q_bar, U_bar, B and T = U + (m+1)/m B."""
    m = len(fits)
    if m < 2:
        raise ValueError("pooling requires at least 2 fits")
    names = list(fits[0].estimates.by_name().keys())
    for fit in fits[1:]:
        if list(fit.estimates.by_name().keys()) != names:
            raise ValueError("fits cover different parameter sets")

    q_bar: dict[str, float] = {}
    u_bar: dict[str, float] = {}
    b_m: dict[str, float] = {}
    t_var: dict[str, float] = {}
    missing: list[str] = []
    for name in names:
        q = np.array([fit.estimates.by_name()[name] for fit in fits])
        u = np.array([fit.std_errors.get(name, np.nan) ** 2 for fit in fits])
        q_bar[name] = float(np.mean(q))
        b = float(np.sum((q - q_bar[name]) ** 2) / (m - 1))
        b_m[name] = b
        if np.any(~np.isfinite(u)):
            missing.append(name)
            u_bar[name] = np.nan
            t_var[name] = np.nan
        else:
            u_bar[name] = float(np.mean(u))
            t_var[name] = u_bar[name] + (m + 1) / m * b
    return PooledFit(
        q_bar=q_bar, t_var=t_var, u_bar=u_bar, b_m=b_m, m=m, missing_se=tuple(missing)
    )
