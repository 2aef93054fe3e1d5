"""Data-generating state-space model and trajectory simulation.

The study design is a 2-state / 6-indicator dynamic factor model: indicators
1-3 load only on state 1, indicators 4-6 only on state 2, state noise fixed
at the identity and measurement error diagonal. Types are dimension-generic;
the study grid is produced by `make_condition`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels

SIGMA2_LEVELS = (0.25, 0.75)
ALPHA_LEVELS = (0.2, 0.7)
GAMMA_LEVELS = (0.0, 0.15, 0.3)
BEEPS_PER_DAY = 10
DEFAULT_BURN_IN = 100


class InvalidConditionError(ValueError):
    pass


class NonStationaryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameterization: transitions A, loadings H, noise covariances Q, R."""

    A: np.ndarray  # (p, p)
    H: np.ndarray  # (l, p)
    Q: np.ndarray  # (p, p), symmetric PSD
    R: np.ndarray  # (l, l), diagonal with nonnegative entries

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        H = np.asarray(self.H, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        p = A.shape[0]
        l = H.shape[0]
        if A.shape != (p, p) or H.shape != (l, p) or Q.shape != (p, p) or R.shape != (l, l):
            raise ValueError("inconsistent parameter shapes")
        if not np.allclose(Q, Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.T)) < -1e-10):
            raise ValueError("Q must be positive semidefinite")
        if np.any(R[~np.eye(l, dtype=bool)] != 0.0):
            raise ValueError("R must be diagonal")
        if np.any(np.diag(R) < 0.0):
            raise ValueError("R diagonal entries must be nonnegative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_indicators(self) -> int:
        return self.H.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def is_stationary(self, tol: float = 1.0) -> bool:
        return self.spectral_radius() < tol


@dataclass
class LatentTrajectory:
    """State values per timepoint, (T, p)."""

    x: np.ndarray


@dataclass
class MaskedSeries:
    """Observations with a missingness mask and optional latent ground truth.

    mask[t, j] is True when entry (t, j) is missing. A freshly simulated
    series has an all-false mask; only the missingness module sets entries.
    day_index holds the beep-within-day position, cycling 1..BEEPS_PER_DAY.
    """

    z: np.ndarray
    mask: np.ndarray
    day_index: np.ndarray
    truth: LatentTrajectory | None = field(default=None)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.day_index = np.asarray(self.day_index, dtype=np.int64)
        if self.mask.shape != self.z.shape:
            raise ValueError("mask shape must match observations")
        if self.day_index.shape != (self.z.shape[0],):
            raise ValueError("day_index must have one entry per timepoint")

    @classmethod
    def unmasked(cls, z: np.ndarray, truth: LatentTrajectory | None = None) -> "MaskedSeries":
        z = np.asarray(z, dtype=float)
        return cls(z=z, mask=np.zeros(z.shape, dtype=bool), day_index=day_cycle(z.shape[0]), truth=truth)

    @property
    def n_timepoints(self) -> int:
        return self.z.shape[0]

    def copy(self) -> "MaskedSeries":
        truth = LatentTrajectory(self.truth.x.copy()) if self.truth is not None else None
        return MaskedSeries(self.z.copy(), self.mask.copy(), self.day_index.copy(), truth)

    def masked_fraction(self) -> float:
        """Fraction of timepoints whose first-block indicators are masked."""
        return float(np.mean(np.any(self.mask, axis=1)))


def day_cycle(T: int) -> np.ndarray:
    """Beep-within-day index 1..BEEPS_PER_DAY; a non-multiple T ends mid-day."""
    return (np.arange(T, dtype=np.int64) % BEEPS_PER_DAY) + 1


def make_condition(sigma2: float, alpha: float, gamma: float) -> ModelParams:
    """Parameters for one grid condition.

    A = [[alpha, gamma], [0, alpha]], Q = I, R = sigma2 * I, and every
    nonzero loading is sqrt(1 - sigma2) so that sigma2 + lambda^2 = 1.
    Values off the study grid are allowed but warned about.
    """
    if not 0.0 < sigma2 < 1.0:
        raise InvalidConditionError(f"sigma2 must be in (0, 1), got {sigma2}")
    on_grid = (
        any(np.isclose(sigma2, s) for s in SIGMA2_LEVELS)
        and any(np.isclose(alpha, a) for a in ALPHA_LEVELS)
        and any(np.isclose(gamma, g) for g in GAMMA_LEVELS)
    )
    if not on_grid:
        warnings.warn(
            f"condition (sigma2={sigma2}, alpha={alpha}, gamma={gamma}) is not on the study grid",
            UserWarning,
            stacklevel=2,
        )
    lam = np.sqrt(1.0 - sigma2)
    A = np.array([[alpha, gamma], [0.0, alpha]])
    H = np.zeros((6, 2))
    H[0:3, 0] = lam
    H[3:6, 1] = lam
    return ModelParams(A=A, H=H, Q=np.eye(2), R=sigma2 * np.eye(6))


def stationary_covariance(params: ModelParams) -> np.ndarray:
    """Stationary state covariance: the solution of S = A S A' + Q."""
    if not params.is_stationary():
        raise NonStationaryError(
            f"spectral radius {params.spectral_radius():.4f} >= 1; no stationary covariance"
        )
    S = scipy.linalg.solve_discrete_lyapunov(params.A, params.Q)
    S = 0.5 * (S + S.T)
    resid = np.max(np.abs(S - params.A @ S @ params.A.T - params.Q))
    if resid > 1e-10:
        raise RuntimeError(f"Lyapunov residual {resid:.2e} exceeds tolerance")
    return S


def simulate(
    params: ModelParams,
    T: int,
    seed,
    burn_in: int = DEFAULT_BURN_IN,
) -> MaskedSeries:
    """Simulate a trajectory of T timepoints with ground truth attached.

    The initial state is drawn from the stationary distribution and burn_in
    extra steps are discarded, so every retained state is marginally
    stationary. Deterministic given (params, T, seed, burn_in).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if burn_in < 0:
        raise ValueError("burn_in must be >= 0")
    sigma = stationary_covariance(params)
    p = params.n_states
    l = params.n_indicators
    rng = np.random.default_rng(seed)

    x_init = np.linalg.cholesky(sigma + 1e-12 * np.eye(p)) @ rng.standard_normal(p)
    chol_q = np.linalg.cholesky(params.Q + 1e-12 * np.eye(p))
    shocks = rng.standard_normal((burn_in + T, p)) @ chol_q.T
    states = _kernels.simulate_states(params.A, x_init, shocks)[burn_in:]

    noise = rng.standard_normal((T, l)) * np.sqrt(np.diag(params.R))
    z = states @ params.H.T + noise
    return MaskedSeries(
        z=z,
        mask=np.zeros((T, l), dtype=bool),
        day_index=day_cycle(T),
        truth=LatentTrajectory(x=states),
    )
