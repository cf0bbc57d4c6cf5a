"""Compiled Metropolis-within-Gibbs kernel for the spatially varying AR(1).

One sweep updates, in order: the innovation variance (conjugate
inverse-gamma draw), each latent copula coordinate (componentwise
random-walk Metropolis), the spatial mixing weight (random walk on its
logit), the prior scale (exact conjugate draw), and the missing-year
values (exact conditional draw).

The sampler works in the standardized latent field ``u_i =
eta_i / sqrt(Omega_ii)``: the AR coefficients are ``rho_i = 2*Phi(u_i)-1``
and the prior of ``u`` is the correlation matrix of the CAR covariance,
whose precision ``P = S Q S`` (``S = diag(sqrt(diag(Q^{-1})))``) does not
involve the scale ``tau2`` at all. Centered updates (random walks on eta
with tau2 and lambda moving underneath) are quasi-absorbing once
|eta| >> sqrt(Omega_ii), because local proposals cannot re-cross the scale
gap; the standardized field has no such direction, and tau2 reduces to an
exact draw from its inverse-gamma conditional. Stored ``eta`` draws are
reconstructed as ``u * sqrt(tau2) * sqrt(diag(Q^{-1}))``.

``Q = (1-lambda)*I + lambda*R`` shares the eigenvectors of ``R`` for every
``lambda``, so the kernel works in that fixed eigenbasis: determinants,
quadratic forms, and ``diag(Q^{-1})`` cost O(n) or one matrix-vector
product instead of a fresh factorization per proposal. Incremental state
per chain: ``ws = V'(S u)``, ``quad = u'P u``, and per-group residual sums
of squares. Step sizes adapt only during burn-in.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
# Guard for the logit random walk: keeps 1-lambda (hence every eigenvalue
# of Q and entry of diag(Q^{-1})) comfortably inside double range.
LOGIT_BOUND = 500.0


@njit(cache=True)
def _phi(x):
    return 0.5 * (1.0 + math.erf(x / SQRT2))


@njit(cache=True)
def _group_ssr(Z, i, rho_i):
    s = 0.0
    for t in range(1, Z.shape[1]):
        r = Z[i, t] - rho_i * Z[i, t - 1]
        s += r * r
    return s


@njit(cache=True)
def _total_ssr(Z, rho, out):
    s = 0.0
    for i in range(Z.shape[0]):
        out[i] = _group_ssr(Z, i, rho[i])
        s += out[i]
    return s


@njit(cache=True)
def run_chain(Z0, gap_idx, V, V2, eig_R,
              n_iter, burn_in, thin,
              a_sig, b_sig, a_tau, b_tau,
              step_u0, step_lam0,
              adapt_interval, acc_lo, acc_hi,
              prior_only, seed):
    np.random.seed(seed)
    n, T = Z0.shape
    Z = Z0.copy()
    if gap_idx >= 0:
        for i in range(n):
            Z[i, gap_idx] = 0.0

    n_keep = (n_iter - burn_in) // thin
    eta_keep = np.empty((n_keep, n))
    rho_keep = np.empty((n_keep, n))
    sig_keep = np.empty(n_keep)
    tau_keep = np.empty(n_keep)
    lam_keep = np.empty(n_keep)
    zmiss_keep = np.empty((n_keep, n))

    # --- initial state: u = 0 (rho = 0), lam = 0.5, tau2 = 1
    u = np.zeros(n)
    rho = np.zeros(n)
    lam = 0.5
    tau2 = 1.0
    d = (1.0 - lam) + lam * eig_R        # eigenvalues of Q
    qdiag = V2 @ d                        # diag(Q)
    qinv_diag = V2 @ (1.0 / d)            # diag(Q^{-1})
    s = np.sqrt(qinv_diag)                # scale of eta relative to u
    ws = np.zeros(n)                      # V' (S u)
    quad = 0.0                            # u' P u

    ssr_g = np.empty(n)
    ssr = _total_ssr(Z, rho, ssr_g)
    ntrans = n * (T - 1)
    sigma2 = 1.0 if prior_only else max(ssr / ntrans, 1e-8)
    shape_sig = a_sig + 0.5 * ntrans

    step_u = np.full(n, step_u0)
    step_lam = step_lam0
    win_u = np.zeros(n)
    win_lam = 0.0
    tot_u = 0.0
    tot_lam = 0.0

    keep = 0
    for it in range(1, n_iter + 1):
        # (1) innovation variance: conjugate inverse-gamma draw
        if prior_only:
            g = np.random.gamma(a_sig, 1.0)
            sigma2 = b_sig / max(g, 1e-300)
        else:
            g = np.random.gamma(shape_sig, 1.0)
            sigma2 = (b_sig + 0.5 * ssr) / max(g, 1e-300)

        # (2) standardized latent field, one coordinate at a time
        for i in range(n):
            delta = step_u[i] * np.random.normal()
            u_new = u[i] + delta
            pc = 0.0
            for k in range(n):
                pc += d[k] * V[i, k] * ws[k]
            pc *= s[i]                     # (P u)_i
            pii = s[i] * s[i] * qdiag[i]   # P_ii
            dquad = 2.0 * delta * pc + pii * delta * delta
            logr = -0.5 * dquad
            rho_new = 2.0 * _phi(u_new) - 1.0
            dssr = 0.0
            if not prior_only:
                s_new = _group_ssr(Z, i, rho_new)
                dssr = s_new - ssr_g[i]
                logr += -0.5 * dssr / sigma2
            if math.log(np.random.random()) < logr:
                u[i] = u_new
                rho[i] = rho_new
                quad += dquad
                step_si = delta * s[i]
                for k in range(n):
                    ws[k] += step_si * V[i, k]
                ssr_g[i] += dssr
                ssr += dssr
                win_u[i] += 1.0
                if it > burn_in:
                    tot_u += 1.0

        # (3) spatial mixing weight: random walk on logit(lambda), holding
        # the standardized field fixed (the likelihood does not move)
        lg = math.log(lam / (1.0 - lam)) + step_lam * np.random.normal()
        if abs(lg) < LOGIT_BOUND:
            lam_new = 1.0 / (1.0 + math.exp(-lg))
            d_new = (1.0 - lam_new) + lam_new * eig_R
            qinv_new = V2 @ (1.0 / d_new)
            s_new = np.sqrt(qinv_new)
            su = s_new * u
            ws_new = V.T @ su
            logdet_new = 0.0
            quad_new = 0.0
            logdet_old = 0.0
            for k in range(n):
                logdet_new += math.log(d_new[k]) + math.log(qinv_new[k])
                quad_new += d_new[k] * ws_new[k] * ws_new[k]
                logdet_old += math.log(d[k]) + math.log(qinv_diag[k])
            quad_old = 0.0
            for k in range(n):
                quad_old += d[k] * ws[k] * ws[k]
            logr = 0.5 * (logdet_new - logdet_old) - 0.5 * (quad_new - quad_old)
            logr += (math.log(lam_new * (1.0 - lam_new))
                     - math.log(lam * (1.0 - lam)))
            if math.log(np.random.random()) < logr:
                lam = lam_new
                d = d_new
                qdiag = V2 @ d
                qinv_diag = qinv_new
                s = s_new
                ws = ws_new
                quad = quad_new
                win_lam += 1.0
                if it > burn_in:
                    tot_lam += 1.0

        # (4) prior scale: exact conjugate draw. In the standardized
        # parameterization neither the likelihood nor the density of u
        # involves tau2, so its full conditional is its prior.
        g = np.random.gamma(a_tau, 1.0)
        tau2 = b_tau / max(g, 1e-300)

        # (5) missing-year draw from its exact conditional
        if gap_idx >= 0 and not prior_only:
            m = gap_idx
            for i in range(n):
                denom = 1.0 + rho[i] * rho[i]
                mu = rho[i] * (Z[i, m - 1] + Z[i, m + 1]) / denom
                z_new = mu + math.sqrt(sigma2 / denom) * np.random.normal()
                r1o = Z[i, m] - rho[i] * Z[i, m - 1]
                r2o = Z[i, m + 1] - rho[i] * Z[i, m]
                Z[i, m] = z_new
                r1n = Z[i, m] - rho[i] * Z[i, m - 1]
                r2n = Z[i, m + 1] - rho[i] * Z[i, m]
                dssr = r1n * r1n + r2n * r2n - r1o * r1o - r2o * r2o
                ssr_g[i] += dssr
                ssr += dssr

        # burn-in step tuning toward the target acceptance window
        if it <= burn_in and it % adapt_interval == 0:
            inv = 1.0 / adapt_interval
            for i in range(n):
                rate = win_u[i] * inv
                if rate < acc_lo:
                    step_u[i] *= 0.8
                elif rate > acc_hi:
                    step_u[i] *= 1.25
                win_u[i] = 0.0
            if win_lam * inv < acc_lo:
                step_lam *= 0.8
            elif win_lam * inv > acc_hi:
                step_lam *= 1.25
            win_lam = 0.0

        # guard against floating-point drift in the incremental sums
        if it % 1000 == 0:
            su = s * u
            ws = V.T @ su
            quad = 0.0
            for k in range(n):
                quad += d[k] * ws[k] * ws[k]
            if not prior_only:
                ssr = _total_ssr(Z, rho, ssr_g)

        if it > burn_in and (it - burn_in) % thin == 0:
            sqrt_tau = math.sqrt(tau2)
            for i in range(n):
                eta_keep[keep, i] = u[i] * sqrt_tau * s[i]
                rho_keep[keep, i] = rho[i]
            sig_keep[keep] = sigma2
            tau_keep[keep] = tau2
            lam_keep[keep] = lam
            if gap_idx >= 0:
                zmiss_keep[keep] = Z[:, gap_idx]
            else:
                zmiss_keep[keep] = np.nan
            keep += 1

    post = max(n_iter - burn_in, 1)
    acc_u = tot_u / (post * n)
    acc_lam = tot_lam / post
    return (eta_keep, rho_keep, sig_keep, tau_keep, lam_keep, zmiss_keep,
            acc_u, acc_lam)
