"""Compiled inner loops for the entry-wise abundance updates.

Random numbers are drawn by the caller's numpy Generator and passed in, so
chains stay reproducible and the kernels themselves are deterministic.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _ig_data_term(n, s1, s2, a, b, h):
    return -(a + 0.5 * n) * math.log(b + 0.5 * (s2 - s1 * s1 / (n + 1.0 / h)))


@njit(cache=True)
def _top_delta(j, k, lo, ln, gamma, S1, S2, T1, T2, n_k, n, a, b, h):
    if gamma[j]:
        s1o = S1[k, j]
        s2o = S2[k, j]
        s1n = s1o - lo + ln
        s2n = s2o - lo * lo + ln * ln
        return (_ig_data_term(n_k[k], s1n, s2n, a[k + 1], b[k + 1], h[k + 1])
                - _ig_data_term(n_k[k], s1o, s2o, a[k + 1], b[k + 1], h[k + 1]))
    t1o = T1[j]
    t2o = T2[j]
    t1n = t1o - lo + ln
    t2n = t2o - lo * lo + ln * ln
    return (_ig_data_term(n, t1n, t2n, a[0], b[0], h[0])
            - _ig_data_term(n, t1o, t2o, a[0], b[0], h[0]))


@njit(cache=True)
def _commit(i, j, k, new, ln, alpha, log_alpha, S1, S2, T1, T2):
    lo = log_alpha[i, j]
    S1[k, j] += ln - lo
    S2[k, j] += ln * ln - lo * lo
    T1[j] += ln - lo
    T2[j] += ln * ln - lo * lo
    alpha[i, j] = new
    log_alpha[i, j] = ln


@njit(cache=True)
def _nb_lambda_part(y, lam, phi):
    return -phi * math.log1p(lam / phi) + y * (math.log(lam) - math.log(lam + phi))


@njit(cache=True)
def alpha_sweep_zinb(alpha, log_alpha, y, active, s, phi, codes, gamma,
                     S1, S2, T1, T2, n_k, n, a, b, h, noise, logu, log_scale=False):
    """One random-walk pass over every entry, column by column."""
    nrow, p = alpha.shape
    accepted = 0
    for j in range(p):
        phij = phi[j]
        for i in range(nrow):
            old = alpha[i, j]
            lo = log_alpha[i, j]
            if log_scale:
                ln = lo + noise[i, j]
                new = math.exp(ln)
                jac = 0.0
            else:
                new = old + noise[i, j]
                if new <= 0.0:
                    continue
                ln = math.log(new)
                # the selection layer is a density on log alpha; the walk is on alpha
                jac = lo - ln
            k = codes[i]
            d = _top_delta(j, k, lo, ln, gamma, S1, S2, T1, T2, n_k, n, a, b, h) + jac
            if active[i, j]:
                yij = y[i, j]
                d += _nb_lambda_part(yij, s[i] * new, phij) - _nb_lambda_part(yij, s[i] * old, phij)
            if logu[i, j] < d:
                _commit(i, j, k, new, ln, alpha, log_alpha, S1, S2, T1, T2)
                accepted += 1
    return accepted


@njit(cache=True)
def alpha_sweep_dm(alpha, log_alpha, y, Y, A, codes, gamma,
                   S1, S2, T1, T2, n_k, n, a, b, h, noise, logu, log_scale=False):
    """Dirichlet-multinomial version; ``A`` holds the running row sums."""
    nrow, p = alpha.shape
    accepted = 0
    for j in range(p):
        for i in range(nrow):
            old = alpha[i, j]
            lo = log_alpha[i, j]
            if log_scale:
                ln = lo + noise[i, j]
                new = math.exp(ln)
                jac = 0.0
            else:
                new = old + noise[i, j]
                if new <= 0.0:
                    continue
                ln = math.log(new)
                # the selection layer is a density on log alpha; the walk is on alpha
                jac = lo - ln
            k = codes[i]
            d = _top_delta(j, k, lo, ln, gamma, S1, S2, T1, T2, n_k, n, a, b, h) + jac
            A_old = A[i]
            A_new = A_old + (new - old)
            yij = y[i, j]
            d += (math.lgamma(A_new) - math.lgamma(A_old)
                  - math.lgamma(Y[i] + A_new) + math.lgamma(Y[i] + A_old)
                  + math.lgamma(yij + new) - math.lgamma(new)
                  - math.lgamma(yij + old) + math.lgamma(old))
            if logu[i, j] < d:
                _commit(i, j, k, new, ln, alpha, log_alpha, S1, S2, T1, T2)
                A[i] = A_new
                accepted += 1
    return accepted


def warmup():
    """Trigger compilation on a tiny problem."""
    n, p, K = 2, 1, 2
    f = np.ones((n, p))
    z = np.zeros((n, p))
    codes = np.arange(n, dtype=np.int64) % K
    g = np.zeros(p, dtype=np.int8)
    S = np.zeros((K, p))
    T = np.zeros(p)
    nk = np.ones(K)
    hyp = np.ones(K + 1)
    alpha_sweep_zinb(f.copy(), z.copy(), z, np.ones((n, p), dtype=np.bool_), np.ones(n), np.ones(p),
                     codes, g, S.copy(), S.copy(), T.copy(), T.copy(), nk, float(n), hyp, hyp, hyp, z, z - 1)
    alpha_sweep_dm(f.copy(), z.copy(), z, np.zeros(n), np.ones(n), codes, g, S.copy(), S.copy(),
                   T.copy(), T.copy(), nk, float(n), hyp, hyp, hyp, z, z - 1)
