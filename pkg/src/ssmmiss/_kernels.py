"""Compiled inner loops for simulation and filtering.

The filter is hand-rolled (no LAPACK calls inside the loop) because the
study evaluates the likelihood hundreds of times per fit and runs hundreds of
thousands of fits; per-call dispatch overhead would dominate otherwise.
State dimension p and indicator count l are generic but assumed small.
"""
from __future__ import annotations

import numpy as np
from numba import njit

LOG_2PI = 1.8378770664093453

STATUS_OK = 0
STATUS_SINGULAR_INNOVATION = 1


@njit(cache=True)
def simulate_states(A, x_init, shocks):
    """Iterate x_{t} = A x_{t-1} + shock_t, returning all post-initial states."""
    n, p = shocks.shape
    out = np.empty((n, p))
    x = x_init.copy()
    for t in range(n):
        for i in range(p):
            s = shocks[t, i]
            for k in range(p):
                s += A[i, k] * x[k]
            out[t, i] = s
        for i in range(p):
            x[i] = out[t, i]
    return out


@njit(cache=True)
def kalman_filter(A, H, Q, r_diag, z, miss, x0, P0):
    """Kalman filter with row-wise missing observations.

    miss[t, j] is True when z[t, j] is unobserved; fully-missing rows skip
    the measurement update entirely. The measurement update uses the
    Joseph-stabilized covariance form and the log-likelihood accumulates the
    Gaussian log-density of the observed components only. Covariances are
    symmetrized every step.

    Returns (pred_means, pred_covs, filt_means, filt_covs, loglik, status).
    """
    T, l = z.shape
    p = A.shape[0]

    pred_m = np.empty((T, p))
    pred_P = np.empty((T, p, p))
    filt_m = np.empty((T, p))
    filt_P = np.empty((T, p, p))

    x = x0.copy()
    P = P0.copy()

    obs_idx = np.empty(l, np.int64)
    v = np.empty(l)
    Ho = np.empty((l, p))
    PHt = np.empty((p, l))
    S = np.empty((l, l))
    L = np.empty((l, l))
    alpha = np.empty(l)
    K = np.empty((p, l))
    W = np.empty((l, p))
    IKH = np.empty((p, p))
    work_pp = np.empty((p, p))
    tmp_pp = np.empty((p, p))
    xn = np.empty(p)

    ll = 0.0

    for t in range(T):
        if t > 0:
            # time update: x <- A x, P <- A P A' + Q
            for i in range(p):
                s = 0.0
                for k in range(p):
                    s += A[i, k] * x[k]
                xn[i] = s
            for i in range(p):
                x[i] = xn[i]
            for i in range(p):
                for j in range(p):
                    s = 0.0
                    for k in range(p):
                        s += A[i, k] * P[k, j]
                    work_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    s = Q[i, j]
                    for k in range(p):
                        s += work_pp[i, k] * A[j, k]
                    tmp_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    P[i, j] = 0.5 * (tmp_pp[i, j] + tmp_pp[j, i])

        for i in range(p):
            pred_m[t, i] = x[i]
            for j in range(p):
                pred_P[t, i, j] = P[i, j]

        n = 0
        for j in range(l):
            if not miss[t, j]:
                obs_idx[n] = j
                n += 1

        if n > 0:
            for a in range(n):
                j = obs_idx[a]
                for k in range(p):
                    Ho[a, k] = H[j, k]
            for a in range(n):
                j = obs_idx[a]
                s = z[t, j]
                for k in range(p):
                    s -= Ho[a, k] * x[k]
                v[a] = s
            for i in range(p):
                for a in range(n):
                    s = 0.0
                    for k in range(p):
                        s += P[i, k] * Ho[a, k]
                    PHt[i, a] = s
            for a in range(n):
                for b in range(a + 1):
                    s = 0.0
                    for k in range(p):
                        s += Ho[a, k] * PHt[k, b]
                    S[a, b] = s
                S[a, a] += r_diag[obs_idx[a]]

            # Cholesky S = L L' (lower), abort on a non-positive pivot
            ok = True
            for a in range(n):
                for b in range(a + 1):
                    s = S[a, b]
                    for k in range(b):
                        s -= L[a, k] * L[b, k]
                    if a == b:
                        if s <= 0.0:
                            ok = False
                            break
                        L[a, a] = np.sqrt(s)
                    else:
                        L[a, b] = s / L[b, b]
                if not ok:
                    break
            if not ok:
                return pred_m, pred_P, filt_m, filt_P, np.nan, STATUS_SINGULAR_INNOVATION

            quad = 0.0
            logdet = 0.0
            for a in range(n):
                s = v[a]
                for k in range(a):
                    s -= L[a, k] * alpha[k]
                alpha[a] = s / L[a, a]
                quad += alpha[a] * alpha[a]
                logdet += 2.0 * np.log(L[a, a])
            ll += -0.5 * (n * LOG_2PI + logdet + quad)

            # K = P Ho' S^{-1}, via two triangular solves per state column
            for c in range(p):
                for a in range(n):
                    s = PHt[c, a]
                    for k in range(a):
                        s -= L[a, k] * W[k, c]
                    W[a, c] = s / L[a, a]
                for a in range(n - 1, -1, -1):
                    s = W[a, c]
                    for k in range(a + 1, n):
                        s -= L[k, a] * W[k, c]
                    W[a, c] = s / L[a, a]
            for i in range(p):
                for a in range(n):
                    K[i, a] = W[a, i]

            for i in range(p):
                s = x[i]
                for a in range(n):
                    s += K[i, a] * v[a]
                xn[i] = s
            for i in range(p):
                x[i] = xn[i]

            # Joseph form: P <- (I - K Ho) P (I - K Ho)' + K R_obs K'
            for i in range(p):
                for j in range(p):
                    s = 1.0 if i == j else 0.0
                    for a in range(n):
                        s -= K[i, a] * Ho[a, j]
                    IKH[i, j] = s
            for i in range(p):
                for j in range(p):
                    s = 0.0
                    for k in range(p):
                        s += IKH[i, k] * P[k, j]
                    work_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    s = 0.0
                    for k in range(p):
                        s += work_pp[i, k] * IKH[j, k]
                    for a in range(n):
                        s += K[i, a] * r_diag[obs_idx[a]] * K[j, a]
                    tmp_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    P[i, j] = 0.5 * (tmp_pp[i, j] + tmp_pp[j, i])

        for i in range(p):
            filt_m[t, i] = x[i]
            for j in range(p):
                filt_P[t, i, j] = P[i, j]

    return pred_m, pred_P, filt_m, filt_P, ll, STATUS_OK


@njit(cache=True)
def kalman_loglik_grad(A, H, Q, r_diag, z, miss, x0, P0):
    """Log-likelihood and its reverse-mode gradient in (A, H, r_diag, P0).

    Forward pass stores per-step intermediates, reverse pass accumulates
    adjoints through the closed-form update x1 = xp + K v,
    P1 = Pp - M S^{-1} M' with M = Pp Ho', which equals the Joseph-form value.
    The caller adds the chain-rule term for any dependence of P0 on A.

    Returns (ll, gA, gH, gr, gP0, status).
    """
    T, l = z.shape
    p = A.shape[0]

    gA = np.zeros((p, p))
    gH = np.zeros((l, p))
    gr = np.zeros(l)
    gP0 = np.zeros((p, p))

    xp_s = np.empty((T, p))
    Pp_s = np.empty((T, p, p))
    fx_s = np.empty((T, p))
    fP_s = np.empty((T, p, p))
    v_s = np.empty((T, l))
    u_s = np.empty((T, l))
    W_s = np.empty((T, l, l))
    K_s = np.empty((T, p, l))
    nobs_s = np.empty(T, np.int64)
    oidx_s = np.empty((T, l), np.int64)

    L = np.empty((l, l))
    S = np.empty((l, l))
    Ho = np.empty((l, p))
    PHt = np.empty((p, l))
    col = np.empty(l)
    work_pp = np.empty((p, p))
    tmp_pp = np.empty((p, p))
    xn = np.empty(p)

    x = x0.copy()
    P = P0.copy()
    ll = 0.0

    for t in range(T):
        if t > 0:
            for i in range(p):
                s = 0.0
                for k in range(p):
                    s += A[i, k] * x[k]
                xn[i] = s
            for i in range(p):
                x[i] = xn[i]
            for i in range(p):
                for j in range(p):
                    s = 0.0
                    for k in range(p):
                        s += A[i, k] * P[k, j]
                    work_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    s = Q[i, j]
                    for k in range(p):
                        s += work_pp[i, k] * A[j, k]
                    tmp_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    P[i, j] = 0.5 * (tmp_pp[i, j] + tmp_pp[j, i])
        for i in range(p):
            xp_s[t, i] = x[i]
            for j in range(p):
                Pp_s[t, i, j] = P[i, j]

        n = 0
        for j in range(l):
            if not miss[t, j]:
                oidx_s[t, n] = j
                n += 1
        nobs_s[t] = n

        if n > 0:
            for a in range(n):
                j = oidx_s[t, a]
                for k in range(p):
                    Ho[a, k] = H[j, k]
            for a in range(n):
                j = oidx_s[t, a]
                s = z[t, j]
                for k in range(p):
                    s -= Ho[a, k] * x[k]
                v_s[t, a] = s
            for i in range(p):
                for a in range(n):
                    s = 0.0
                    for k in range(p):
                        s += P[i, k] * Ho[a, k]
                    PHt[i, a] = s
            for a in range(n):
                for b in range(a + 1):
                    s = 0.0
                    for k in range(p):
                        s += Ho[a, k] * PHt[k, b]
                    S[a, b] = s
                    S[b, a] = s
                S[a, a] += r_diag[oidx_s[t, a]]

            ok = True
            for a in range(n):
                for b in range(a + 1):
                    s = S[a, b]
                    for k in range(b):
                        s -= L[a, k] * L[b, k]
                    if a == b:
                        if s <= 0.0:
                            ok = False
                            break
                        L[a, a] = np.sqrt(s)
                    else:
                        L[a, b] = s / L[b, b]
                if not ok:
                    break
            if not ok:
                return np.nan, gA, gH, gr, gP0, STATUS_SINGULAR_INNOVATION

            # W = S^{-1} from the Cholesky factor, column by column
            for c in range(n):
                for a in range(n):
                    s = 1.0 if a == c else 0.0
                    for k in range(a):
                        s -= L[a, k] * col[k]
                    col[a] = s / L[a, a]
                for a in range(n - 1, -1, -1):
                    s = col[a]
                    for k in range(a + 1, n):
                        s -= L[k, a] * col[k]
                    col[a] = s / L[a, a]
                for a in range(n):
                    W_s[t, a, c] = col[a]

            logdet = 0.0
            for a in range(n):
                logdet += 2.0 * np.log(L[a, a])
            quad = 0.0
            for a in range(n):
                s = 0.0
                for b in range(n):
                    s += W_s[t, a, b] * v_s[t, b]
                u_s[t, a] = s
                quad += s * v_s[t, a]
            ll += -0.5 * (n * LOG_2PI + logdet + quad)

            # K = M W with M = P Ho'
            for i in range(p):
                for a in range(n):
                    s = 0.0
                    for b in range(n):
                        s += PHt[i, b] * W_s[t, b, a]
                    K_s[t, i, a] = s
            for i in range(p):
                s = x[i]
                for a in range(n):
                    s += K_s[t, i, a] * v_s[t, a]
                xn[i] = s
            for i in range(p):
                x[i] = xn[i]
            # P <- P - M W M' = P - K M'
            for i in range(p):
                for j in range(p):
                    s = 0.0
                    for a in range(n):
                        s += K_s[t, i, a] * PHt[j, a]
                    tmp_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    P[i, j] -= 0.5 * (tmp_pp[i, j] + tmp_pp[j, i])

        for i in range(p):
            fx_s[t, i] = x[i]
            for j in range(p):
                fP_s[t, i, j] = P[i, j]

    # ---- reverse pass ----
    gx = np.zeros(p)
    gP = np.zeros((p, p))
    gxp = np.empty(p)
    gPp = np.empty((p, p))
    gS = np.empty((l, l))
    gW = np.empty((l, l))
    gM = np.empty((p, l))
    gv = np.empty(l)
    M = np.empty((p, l))
    GMW = np.empty((p, l))
    WgWW = np.empty((l, l))
    tmp_ln = np.empty((l, l))
    tmp_pl = np.empty((p, l))
    gHo = np.empty((l, p))

    for t in range(T - 1, -1, -1):
        n = nobs_s[t]
        if n > 0:
            # rebuild Ho and M = Pp Ho'
            for a in range(n):
                j = oidx_s[t, a]
                for k in range(p):
                    Ho[a, k] = H[j, k]
            for i in range(p):
                for a in range(n):
                    s = 0.0
                    for k in range(p):
                        s += Pp_s[t, i, k] * Ho[a, k]
                    M[i, a] = s

            # gK = gx v', gv = K' gx ; gM/gW from P1 = Pp - M W M'
            for a in range(n):
                s = 0.0
                for i in range(p):
                    s += K_s[t, i, a] * gx[i]
                gv[a] = s
            # GMW = gP M W  (gP symmetric)
            for i in range(p):
                for a in range(n):
                    s = 0.0
                    for k in range(p):
                        s += gP[i, k] * M[k, a]
                    tmp_pl[i, a] = s
            for i in range(p):
                for a in range(n):
                    s = 0.0
                    for b in range(n):
                        s += tmp_pl[i, b] * W_s[t, b, a]
                    GMW[i, a] = s
            # gM = gx v' - 2 GMW + gK W  where gK = gx v'
            # (gx v' appears twice: once directly, once through K = M W)
            for i in range(p):
                for a in range(n):
                    s = 0.0
                    for b in range(n):
                        s += gx[i] * v_s[t, b] * W_s[t, b, a]
                    gM[i, a] = s - 2.0 * GMW[i, a]
            # gW = -M' gP M + M' gK  (gK = gx v')
            for a in range(n):
                for b in range(n):
                    s = 0.0
                    for i in range(p):
                        s += M[i, a] * tmp_pl[i, b]
                    gW[a, b] = -s
            for a in range(n):
                for b in range(n):
                    s = 0.0
                    for i in range(p):
                        s += M[i, a] * gx[i]
                    gW[a, b] += s * v_s[t, b]
            # gS = -W gW W - 0.5 (W - u u'), then symmetrize
            for a in range(n):
                for b in range(n):
                    s = 0.0
                    for c in range(n):
                        s += W_s[t, a, c] * gW[c, b]
                    tmp_ln[a, b] = s
            for a in range(n):
                for b in range(n):
                    s = 0.0
                    for c in range(n):
                        s += tmp_ln[a, c] * W_s[t, c, b]
                    WgWW[a, b] = s
            for a in range(n):
                for b in range(n):
                    gS[a, b] = -WgWW[a, b] - 0.5 * (W_s[t, a, b] - u_s[t, a] * u_s[t, b])
            for a in range(n):
                for b in range(a + 1, n):
                    s = 0.5 * (gS[a, b] + gS[b, a])
                    gS[a, b] = s
                    gS[b, a] = s

            # gv += -u ; gr_o += diag(gS)
            for a in range(n):
                gv[a] -= u_s[t, a]
                gr[oidx_s[t, a]] += gS[a, a]

            # gPp = gP + Ho' gS Ho + gM Ho (then symmetrized)
            for a in range(n):
                for k in range(p):
                    s = 0.0
                    for b in range(n):
                        s += gS[a, b] * Ho[b, k]
                    tmp_ln[a, k] = s  # reuse as (l, p) scratch
            for i in range(p):
                for j in range(p):
                    s = gP[i, j]
                    for a in range(n):
                        s += Ho[a, i] * tmp_ln[a, j] + gM[i, a] * Ho[a, j]
                    gPp[i, j] = s
            for i in range(p):
                for j in range(i + 1, p):
                    s = 0.5 * (gPp[i, j] + gPp[j, i])
                    gPp[i, j] = s
                    gPp[j, i] = s

            # gHo = 2 gS Ho Pp + gM' Pp - gv xp' ; fold into gH rows
            for a in range(n):
                for k in range(p):
                    s = 0.0
                    for c in range(p):
                        s += 2.0 * tmp_ln[a, c] * Pp_s[t, c, k] + gM[c, a] * Pp_s[t, c, k]
                    gHo[a, k] = s - gv[a] * xp_s[t, k]
            for a in range(n):
                j = oidx_s[t, a]
                for k in range(p):
                    gH[j, k] += gHo[a, k]

            # gxp = gx - Ho' gv
            for i in range(p):
                s = gx[i]
                for a in range(n):
                    s -= Ho[a, i] * gv[a]
                gxp[i] = s
        else:
            for i in range(p):
                gxp[i] = gx[i]
                for j in range(p):
                    gPp[i, j] = gP[i, j]

        if t > 0:
            # gA += gxp fx_prev' + 2 gPp A fP_prev ; gx = A' gxp ; gP = A' gPp A
            for i in range(p):
                for k in range(p):
                    s = 0.0
                    for j in range(p):
                        s += A[i, j] * fP_s[t - 1, j, k]
                    work_pp[i, k] = s
            for i in range(p):
                for j in range(p):
                    s = gxp[i] * fx_s[t - 1, j]
                    for k in range(p):
                        s += 2.0 * gPp[i, k] * work_pp[k, j]
                    gA[i, j] += s
            for i in range(p):
                s = 0.0
                for k in range(p):
                    s += A[k, i] * gxp[k]
                xn[i] = s
            for i in range(p):
                gx[i] = xn[i]
            for i in range(p):
                for j in range(p):
                    s = 0.0
                    for k in range(p):
                        s += A[k, i] * gPp[k, j]
                    work_pp[i, j] = s
            for i in range(p):
                for j in range(p):
                    s = 0.0
                    for k in range(p):
                        s += work_pp[i, k] * A[k, j]
                    gP[i, j] = s
        else:
            for i in range(p):
                for j in range(p):
                    gP0[i, j] = gPp[i, j]

    return ll, gA, gH, gr, gP0, STATUS_OK
