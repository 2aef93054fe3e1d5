"""Maximum-likelihood fitting of the constrained state-space model.

Free parameters: alpha11, alpha22, gamma12 (gamma21 fixed at 0 unless freed),
six loadings and six log measurement-error variances; Q is fixed at the
identity for identification. The objective is the negative filter
log-likelihood, minimized with L-BFGS-B; standard errors come from the
numerical Hessian at the optimum with the delta method for derived scales.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import _kernels
from .ssm import MaskedSeries, ModelParams

N_INDICATORS = 6
BLOCK = 3
PENALTY = 1e10
STATIONARY_LIMIT = 0.999
FALLBACK_P0_SCALE = 1e3

CORE_PARAM_NAMES: tuple[str, ...] = (
    "alpha11",
    "alpha22",
    "gamma12",
    *(f"lambda{i}" for i in range(1, 7)),
    *(f"sigma2_{i}" for i in range(1, 7)),
)
DERIVED_PARAM_NAMES: tuple[str, ...] = (
    *(f"lambda2_{i}" for i in range(1, 7)),
    *(f"sigma_{i}" for i in range(1, 7)),
)


@dataclass
class ParamVector:
    """Free parameters; logvars are log measurement-error variances."""

    alpha11: float
    alpha22: float
    gamma12: float
    lambdas: np.ndarray
    logvars: np.ndarray
    gamma21: float | None = None

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.logvars = np.asarray(self.logvars, dtype=float)
        if self.lambdas.shape != (N_INDICATORS,) or self.logvars.shape != (N_INDICATORS,):
            raise ValueError(f"expected {N_INDICATORS} loadings and log-variances")

    def to_array(self) -> np.ndarray:
        head = [self.alpha11, self.alpha22, self.gamma12]
        tail = [] if self.gamma21 is None else [self.gamma21]
        return np.concatenate([head, self.lambdas, self.logvars, tail])

    @classmethod
    def from_array(cls, arr: np.ndarray, free_gamma21: bool = False) -> "ParamVector":
        arr = np.asarray(arr, dtype=float)
        expected = 15 + (1 if free_gamma21 else 0)
        if arr.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {arr.shape}")
        return cls(
            alpha11=float(arr[0]),
            alpha22=float(arr[1]),
            gamma12=float(arr[2]),
            lambdas=arr[3:9].copy(),
            logvars=arr[9:15].copy(),
            gamma21=float(arr[15]) if free_gamma21 else None,
        )

    def unpack(self) -> ModelParams:
        """ModelParams with Q = I and gamma21 = 0 unless freed."""
        g21 = 0.0 if self.gamma21 is None else self.gamma21
        A = np.array([[self.alpha11, self.gamma12], [g21, self.alpha22]])
        H = np.zeros((N_INDICATORS, 2))
        H[:BLOCK, 0] = self.lambdas[:BLOCK]
        H[BLOCK:, 1] = self.lambdas[BLOCK:]
        return ModelParams(A=A, H=H, Q=np.eye(2), R=np.diag(np.exp(self.logvars)))

    def free_names(self) -> tuple[str, ...]:
        names = CORE_PARAM_NAMES
        return names if self.gamma21 is None else names + ("gamma21",)

    def by_name(self) -> dict[str, float]:
        """Natural-scale values for all core (and derived) parameter names."""
        out = {
            "alpha11": self.alpha11,
            "alpha22": self.alpha22,
            "gamma12": self.gamma12,
        }
        if self.gamma21 is not None:
            out["gamma21"] = self.gamma21
        for i in range(N_INDICATORS):
            lam = float(self.lambdas[i])
            s2 = float(np.exp(self.logvars[i]))
            out[f"lambda{i + 1}"] = lam
            out[f"sigma2_{i + 1}"] = s2
            out[f"lambda2_{i + 1}"] = lam * lam
            out[f"sigma_{i + 1}"] = math.sqrt(s2)
        return out


def truth_values(sigma2: float, alpha: float, gamma: float) -> dict[str, float]:
    """True parameter values per name for one grid condition."""
    lam = math.sqrt(1.0 - sigma2)
    out = {"alpha11": alpha, "alpha22": alpha, "gamma12": gamma, "gamma21": 0.0}
    for i in range(1, N_INDICATORS + 1):
        out[f"lambda{i}"] = lam
        out[f"sigma2_{i}"] = sigma2
        out[f"lambda2_{i}"] = 1.0 - sigma2
        out[f"sigma_{i}"] = math.sqrt(sigma2)
    return out


@dataclass
class FitOptions:
    maxiter: int = 500
    ftol: float = 1e-9
    gtol: float = 1e-5
    free_gamma21: bool = False
    multistart: int = 0
    multistart_seed: int = 0
    diffuse_init: bool = False


@dataclass
class FitResult:
    estimates: ParamVector
    std_errors: dict[str, float]
    loglik: float
    converged: bool
    n_iter: int
    derived: dict[str, float]
    hessian_ok: bool = True
    stationary_estimate: bool = True
    n_penalty_evals: int = 0


def _lyap_2x2(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Direct Kronecker solve of S = A S A' + Q for small A."""
    p = A.shape[0]
    M = np.eye(p * p) - np.kron(A, A)
    S = np.linalg.solve(M, Q.reshape(-1)).reshape(p, p)
    return 0.5 * (S + S.T)


def _build_matrices(arr: np.ndarray, free_gamma21: bool):
    g21 = arr[15] if free_gamma21 else 0.0
    A = np.array([[arr[0], arr[2]], [g21, arr[1]]])
    H = np.zeros((N_INDICATORS, 2))
    H[:BLOCK, 0] = arr[3:6]
    H[BLOCK:, 1] = arr[6:9]
    r_diag = np.exp(arr[9:15])
    return A, H, r_diag


def _objective_factory(series: MaskedSeries, options: FitOptions):
    """Closure evaluating the penalized negative log-likelihood on raw arrays."""
    z = np.ascontiguousarray(series.z)
    mask = np.ascontiguousarray(series.mask)
    Q = np.eye(2)
    x0 = np.zeros(2)
    counter = {"penalty": 0}

    def objective(arr: np.ndarray) -> float:
        if not np.all(np.isfinite(arr)):
            counter["penalty"] += 1
            return PENALTY
        A, H, r_diag = _build_matrices(arr, options.free_gamma21)
        if not np.all(np.isfinite(r_diag)):
            counter["penalty"] += 1
            return PENALTY
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        if options.diffuse_init:
            P0 = 1e7 * np.eye(2)
        elif rho < STATIONARY_LIMIT:
            P0 = _lyap_2x2(A, Q)
        else:
            # no stationary prior exists; keep the objective finite with a
            # wide fixed prior so the optimizer can recover
            P0 = FALLBACK_P0_SCALE * np.eye(2)
        *_, ll, status = _kernels.kalman_filter(A, H, Q, r_diag, z, mask, x0, P0)
        if status != _kernels.STATUS_OK or not np.isfinite(ll):
            counter["penalty"] += 1
            return PENALTY
        return -ll

    return objective, counter


def neg_loglik(theta: ParamVector, series: MaskedSeries, options: FitOptions | None = None) -> float:
    """Negative filter log-likelihood; large penalty on numerical failure."""
    options = options or FitOptions(free_gamma21=theta.gamma21 is not None)
    objective, _ = _objective_factory(series, options)
    return objective(theta.to_array())


def _value_and_grad_factory(series: MaskedSeries, options: FitOptions):
    """Closure returning (neg_loglik, analytic gradient) for raw arrays.

    The gradient is the reverse-mode derivative of the filter recursion,
    including the dependence of the stationary initial covariance on A.
    On penalty evaluations the gradient is zero (flat), which L-BFGS-B
    handles by shrinking its step.
    """
    z = np.ascontiguousarray(series.z)
    mask = np.ascontiguousarray(series.mask)
    Q = np.eye(2)
    x0 = np.zeros(2)
    counter = {"penalty": 0}
    n_free = 16 if options.free_gamma21 else 15

    def value_and_grad(arr: np.ndarray) -> tuple[float, np.ndarray]:
        zero = np.zeros(n_free)
        if not np.all(np.isfinite(arr)):
            counter["penalty"] += 1
            return PENALTY, zero
        A, H, r_diag = _build_matrices(arr, options.free_gamma21)
        if not np.all(np.isfinite(r_diag)):
            counter["penalty"] += 1
            return PENALTY, zero
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        stationary = False
        if options.diffuse_init:
            P0 = 1e7 * np.eye(2)
        elif rho < STATIONARY_LIMIT:
            P0 = _lyap_2x2(A, Q)
            stationary = True
        else:
            P0 = FALLBACK_P0_SCALE * np.eye(2)
        ll, gA, gH, gr, gP0, status = _kernels.kalman_loglik_grad(
            A, H, Q, r_diag, z, mask, x0, P0
        )
        if status != _kernels.STATUS_OK or not np.isfinite(ll):
            counter["penalty"] += 1
            return PENALTY, zero
        if stationary:
            # P0 solves P0 = A P0 A' + Q; adjoint V solves V = A' V A + gP0
            V = _lyap_2x2(A.T, 0.5 * (gP0 + gP0.T))
            gA = gA + 2.0 * V @ A @ P0
        grad = np.empty(n_free)
        grad[0] = gA[0, 0]
        grad[1] = gA[1, 1]
        grad[2] = gA[0, 1]
        grad[3:6] = gH[:BLOCK, 0]
        grad[6:9] = gH[BLOCK:, 1]
        grad[9:15] = gr * r_diag  # chain rule through r = exp(logvar)
        if options.free_gamma21:
            grad[15] = gA[1, 0]
        if not np.all(np.isfinite(grad)):
            counter["penalty"] += 1
            return PENALTY, zero
        return -ll, -grad

    return value_and_grad, counter


_FORWARD_STEP = math.sqrt(np.finfo(float).eps)


def neg_loglik_gradient(
    theta: ParamVector,
    series: MaskedSeries,
    method: str = "analytic",
    step: float | None = None,
    options: FitOptions | None = None,
) -> np.ndarray:
    """Gradient of neg_loglik.

    "analytic" (reverse-mode through the filter) is exactly the gradient the
    optimizer uses; "central"/"forward" finite differences serve as
    independent checks.
    """
    options = options or FitOptions(free_gamma21=theta.gamma21 is not None)
    if method == "analytic":
        value_and_grad, _ = _value_and_grad_factory(series, options)
        return value_and_grad(theta.to_array())[1]
    objective, _ = _objective_factory(series, options)
    return _fd_gradient(objective, theta.to_array(), method=method, step=step)


def _fd_gradient(f, x: np.ndarray, method: str = "forward", step: float | None = None) -> np.ndarray:
    g = np.empty_like(x)
    if method == "forward":
        h = (step or _FORWARD_STEP) * (1.0 + np.abs(x))
        f0 = f(x)
        for i in range(x.size):
            xp = x.copy()
            xp[i] += h[i]
            g[i] = (f(xp) - f0) / h[i]
    elif method == "central":
        h = np.full(x.size, step or 1e-6)
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[i] += h[i]
            xm[i] -= h[i]
            g[i] = (f(xp) - f(xm)) / (2.0 * h[i])
    else:
        raise ValueError(f"unknown method {method!r}")
    return g


def _numerical_hessian(grad, x: np.ndarray) -> np.ndarray:
    """Central differences of the gradient, symmetrized."""
    n = x.size
    h = 1e-5 * (1.0 + np.abs(x))
    H = np.empty((n, n))
    for i in range(n):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        H[i] = (grad(xp) - grad(xm)) / (2.0 * h[i])
    return 0.5 * (H + H.T)


def default_init(series: MaskedSeries) -> ParamVector:
    """Deterministic starting point: moderate dynamics, variance split in half."""
    lambdas = np.ones(N_INDICATORS)
    logvars = np.zeros(N_INDICATORS)
    for j in range(N_INDICATORS):
        col = series.z[~series.mask[:, j], j]
        if col.size >= 2:
            v = float(np.var(col, ddof=1))
            if np.isfinite(v) and v > 0:
                lambdas[j] = math.sqrt(v / 2.0)
                logvars[j] = math.log(v / 2.0)
    return ParamVector(alpha11=0.5, alpha22=0.5, gamma12=0.0, lambdas=lambdas, logvars=logvars)


def _sign_normalize(arr: np.ndarray, free_gamma21: bool) -> np.ndarray:
    """Flip loading-block signs to be nonnegative; the likelihood is invariant."""
    out = arr.copy()
    s1 = -1.0 if np.sum(out[3:6]) < 0 else 1.0
    s2 = -1.0 if np.sum(out[6:9]) < 0 else 1.0
    out[3:6] *= s1
    out[6:9] *= s2
    out[2] *= s1 * s2
    if free_gamma21:
        out[15] *= s1 * s2
    return out


def fit_mle(
    series: MaskedSeries,
    init: ParamVector | None = None,
    options: FitOptions | None = None,
) -> FitResult:
    """Quasi-Newton fit of the 15 free parameters (16 with gamma21 freed)."""
    options = options or FitOptions()
    if init is None:
        init = default_init(series)
    if options.free_gamma21 and init.gamma21 is None:
        init = ParamVector(
            init.alpha11, init.alpha22, init.gamma12, init.lambdas, init.logvars, gamma21=0.0
        )

    value_and_grad, counter = _value_and_grad_factory(series, options)

    starts = [init.to_array()]
    if options.multistart > 0:
        rng = np.random.default_rng(options.multistart_seed)
        for _ in range(options.multistart):
            starts.append(starts[0] + rng.normal(scale=0.2, size=starts[0].size))

    best = None
    for x0 in starts:
        res = scipy.optimize.minimize(
            value_and_grad,
            x0,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": options.maxiter, "ftol": options.ftol, "gtol": options.gtol},
        )
        if best is None or res.fun < best.fun:
            best = res

    x_hat = _sign_normalize(best.x, options.free_gamma21)
    estimates = ParamVector.from_array(x_hat, options.free_gamma21)
    free_names = estimates.free_names()

    hess = _numerical_hessian(lambda x: value_and_grad(x)[1], x_hat)
    hessian_ok = True
    se_free = np.full(x_hat.size, np.nan)
    try:
        cov = np.linalg.inv(hess)
        diag = np.diag(cov)
        if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            hessian_ok = False
        else:
            se_free = np.sqrt(diag)
    except np.linalg.LinAlgError:
        hessian_ok = False

    std_errors: dict[str, float] = {}
    for idx, name in enumerate(free_names):
        se = float(se_free[idx])
        if name.startswith("sigma2_"):
            # optimization runs on log-variance; delta method back to variance
            i = int(name.split("_")[1]) - 1
            se = float(np.exp(estimates.logvars[i])) * se
        std_errors[name] = se
    values = estimates.by_name()
    for i in range(1, N_INDICATORS + 1):
        se_lam = std_errors[f"lambda{i}"]
        se_lv = se_free[free_names.index(f"sigma2_{i}")]
        std_errors[f"lambda2_{i}"] = 2.0 * abs(values[f"lambda{i}"]) * se_lam
        std_errors[f"sigma_{i}"] = 0.5 * values[f"sigma_{i}"] * float(se_lv)

    derived = {name: values[name] for name in DERIVED_PARAM_NAMES}
    rho = float(np.max(np.abs(np.linalg.eigvals(estimates.unpack().A))))
    return FitResult(
        estimates=estimates,
        std_errors=std_errors,
        loglik=float(-best.fun),
        converged=bool(best.success),
        n_iter=int(best.nit),
        derived=derived,
        hessian_ok=hessian_ok,
        stationary_estimate=rho < 1.0,
        n_penalty_evals=counter["penalty"],
    )
