"""Evaluation statistics over replicated fits.

Bias is truth - estimate throughout, so positive bias means
underestimation. Outliers (|bias| > cutoff) are excluded from bias medians
only; SE summaries and coverage use every replication with a usable fit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Z_95 = 1.96
DEFAULT_OUTLIER_CUTOFF = 1.0

# Parameter groups summarized jointly (pooled into one distribution). The
# overall "alpha"/"gamma" summaries track the missingness-side parameters
# (the complete-side ones stay available individually).
POOLED_GROUPS: dict[str, tuple[str, ...]] = {
    "alpha": ("alpha11",),
    "gamma": ("gamma12",),
    "lambda2_mis": ("lambda2_1", "lambda2_2", "lambda2_3"),
    "lambda2_obs": ("lambda2_4", "lambda2_5", "lambda2_6"),
    "lambda2": tuple(f"lambda2_{i}" for i in range(1, 7)),
    "sigma2_mis": ("sigma2_1", "sigma2_2", "sigma2_3"),
    "sigma2_obs": ("sigma2_4", "sigma2_5", "sigma2_6"),
    "sigma2": tuple(f"sigma2_{i}" for i in range(1, 7)),
}


def median_bias(truth: float, estimates: np.ndarray) -> float:
    """Median over replications of truth - estimate."""
    estimates = np.asarray(estimates, dtype=float)
    if estimates.size == 0:
        raise ValueError("estimates must be nonempty")
    return float(np.median(truth - estimates))


def median_abs_rel_bias(truth: float, estimates: np.ndarray) -> float:
    """Median of |truth - estimate| / truth; undefined at truth = 0."""
    if truth == 0:
        raise ValueError("relative bias is undefined for a zero true value")
    estimates = np.asarray(estimates, dtype=float)
    if estimates.size == 0:
        raise ValueError("estimates must be nonempty")
    return float(np.median(np.abs(truth - estimates) / truth))


def coverage(truth: float, estimates: np.ndarray, ses: np.ndarray) -> float:
    """Percentage of replications whose 1.96-SE interval contains the truth.

    Replications with missing (NaN) SEs are excluded from the denominator;
    boundary hits count as covered. Returns NaN when no SE is usable.
    """
    estimates = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if estimates.shape != ses.shape:
        raise ValueError("estimates and ses must have equal length")
    if np.any(ses[np.isfinite(ses)] < 0):
        raise ValueError("standard errors must be nonnegative")
    usable = np.isfinite(ses) & np.isfinite(estimates)
    if not np.any(usable):
        return float("nan")
    e, s = estimates[usable], ses[usable]
    hit = (truth >= e - Z_95 * s) & (truth <= e + Z_95 * s)
    return float(100.0 * np.mean(hit))


@dataclass(frozen=True)
class CellId:
    mechanism: str
    rate: float
    method: str
    alpha: float
    gamma: float
    lambda2: float


@dataclass
class ParamDraws:
    """One parameter's replicated estimates and SEs against its true value."""

    truth: float
    estimates: np.ndarray
    ses: np.ndarray

    def __post_init__(self):
        self.estimates = np.asarray(self.estimates, dtype=float)
        self.ses = np.asarray(self.ses, dtype=float)
        if self.estimates.shape != self.ses.shape:
            raise ValueError("estimates and ses must align")


@dataclass
class ParamStats:
    median_bias: float
    median_abs_rel_bias: float | None
    mean_se: float
    coverage_pct: float
    n_replications: int
    n_outliers_excluded: int
    n_se_missing: int


@dataclass
class CellSummary:
    cell: CellId
    stats: dict[str, ParamStats] = field(default_factory=dict)
    n_replications: int = 0
    n_outliers_excluded: int = 0


def _param_stats(draws: ParamDraws, outlier_cutoff: float) -> ParamStats:
    est = draws.estimates
    ok = np.isfinite(est)
    est = est[ok]
    ses = draws.ses[ok]
    n = est.size
    if n == 0:
        return ParamStats(float("nan"), None, float("nan"), float("nan"), 0, 0, 0)

    bias = draws.truth - est
    keep = np.abs(bias) <= outlier_cutoff
    n_excluded = int(np.sum(~keep))
    mb = float(np.median(bias[keep])) if np.any(keep) else float("nan")
    if draws.truth != 0 and np.any(keep):
        marb = float(np.median(np.abs(bias[keep]) / draws.truth))
    else:
        marb = None

    finite_se = np.isfinite(ses)
    mean_se = float(np.mean(ses[finite_se])) if np.any(finite_se) else float("nan")
    cov = coverage(draws.truth, est, ses)
    return ParamStats(
        median_bias=mb,
        median_abs_rel_bias=marb,
        mean_se=mean_se,
        coverage_pct=cov,
        n_replications=n,
        n_outliers_excluded=n_excluded,
        n_se_missing=int(np.sum(~finite_se)),
    )


def pool_draws(draws: dict[str, ParamDraws], names: tuple[str, ...]) -> ParamDraws | None:
    """Concatenate several same-truth parameters into one distribution."""
    present = [draws[n] for n in names if n in draws]
    if not present:
        return None
    truths = {d.truth for d in present}
    if len(truths) != 1:
        raise ValueError(f"cannot pool parameters with differing truths: {names}")
    return ParamDraws(
        truth=present[0].truth,
        estimates=np.concatenate([d.estimates for d in present]),
        ses=np.concatenate([d.ses for d in present]),
    )


def summarize_cell(
    cell: CellId,
    draws: dict[str, ParamDraws],
    outlier_cutoff: float = DEFAULT_OUTLIER_CUTOFF,
) -> CellSummary:
    """Per-parameter statistics for one cell, plus pooled parameter groups."""
    if not draws:
        raise ValueError("at least one parameter is required")
    summary = CellSummary(cell=cell)
    for name, d in draws.items():
        summary.stats[name] = _param_stats(d, outlier_cutoff)
    for group, members in POOLED_GROUPS.items():
        pooled = pool_draws(draws, members)
        if pooled is not None and group not in summary.stats:
            summary.stats[group] = _param_stats(pooled, outlier_cutoff)
    summary.n_replications = max(s.n_replications for s in summary.stats.values())
    summary.n_outliers_excluded = sum(s.n_outliers_excluded for s in summary.stats.values())
    return summary
