"""Independent oracles shared across test modules.

These deliberately avoid the library's own computational paths: the Lyapunov
oracle iterates the recursion, the likelihood oracle builds the dense joint
Gaussian, and the conditioning oracle works on the precision matrix.
"""
from __future__ import annotations

import numpy as np


def lyapunov_fixed_point(A: np.ndarray, Q: np.ndarray, iters: int = 20000) -> np.ndarray:
    """Iterate S <- A S A' + Q to convergence."""
    S = np.zeros_like(Q)
    for _ in range(iters):
        S = A @ S @ A.T + Q
    return S


def joint_gaussian_loglik(params, z: np.ndarray, mask: np.ndarray, P0: np.ndarray) -> float:
    """Log-density of the observed entries of z under the dense joint Gaussian.

    Builds the full T*l covariance by unrolling the state recursion with
    x_0 ~ N(0, P0), deletes masked coordinates and evaluates one multivariate
    normal density.
    """
    A, H, Q, R = params.A, params.H, params.Q, params.R
    T, l = z.shape
    p = A.shape[0]

    V = [None] * T  # Cov(x_t)
    V[0] = P0
    for t in range(1, T):
        V[t] = A @ V[t - 1] @ A.T + Q

    cov = np.zeros((T * l, T * l))
    for s in range(T):
        for t in range(s, T):
            cross = V[s] @ np.linalg.matrix_power(A, t - s).T  # Cov(x_s, x_t)
            block = H @ cross @ H.T
            if s == t:
                block = block + R
            cov[s * l : (s + 1) * l, t * l : (t + 1) * l] = block
            if t != s:
                cov[t * l : (t + 1) * l, s * l : (s + 1) * l] = block.T

    obs = ~mask.reshape(-1)
    cov_obs = cov[np.ix_(obs, obs)]
    z_obs = z.reshape(-1)[obs]
    n = z_obs.size
    if n == 0:
        return 0.0
    sign, logdet = np.linalg.slogdet(cov_obs)
    assert sign > 0
    quad = z_obs @ np.linalg.solve(cov_obs, z_obs)
    return float(-0.5 * (n * np.log(2 * np.pi) + logdet + quad))


def conditional_mean_precision(mu: np.ndarray, sigma: np.ndarray, x: np.ndarray, mis: np.ndarray) -> np.ndarray:
    """Gaussian conditional mean of the missing block via the precision matrix."""
    obs = ~mis
    lam = np.linalg.inv(sigma)
    lam_mm = lam[np.ix_(mis, mis)]
    lam_mo = lam[np.ix_(mis, obs)]
    return mu[mis] - np.linalg.solve(lam_mm, lam_mo @ (x[obs] - mu[obs]))


def random_stationary_params(rng: np.random.Generator, p: int = 2, l: int = 6):
    """Random block-structured ModelParams with spectral radius < 1."""
    from ssmmiss.ssm import ModelParams

    A = np.array([[rng.uniform(-0.8, 0.8), rng.uniform(-0.4, 0.4)], [0.0, rng.uniform(-0.8, 0.8)]])
    H = np.zeros((l, p))
    H[: l // 2, 0] = rng.uniform(0.3, 1.2, l // 2)
    H[l // 2 :, 1] = rng.uniform(0.3, 1.2, l - l // 2)
    R = np.diag(rng.uniform(0.05, 1.0, l))
    return ModelParams(A=A, H=H, Q=np.eye(p), R=R)


def random_mask(rng: np.random.Generator, T: int, l: int = 6, block_only: bool = True) -> np.ndarray:
    """Random row mask; block_only masks indicators 1-3 jointly."""
    mask = np.zeros((T, l), dtype=bool)
    rows = rng.random(T) < 0.4
    if block_only:
        mask[rows, :3] = True
    else:
        mask[rows] = rng.random((int(np.sum(rows)), l)) < 0.5
    return mask
