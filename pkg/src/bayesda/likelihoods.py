"""Log-likelihood kernels for the count models and the selection layer.

All quantities stay on the log scale; gamma functions overflow long before
realistic sequencing depths are reached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import InconsistentState, InvalidParameter

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_positive(name, x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise InvalidParameter(f"{name} must be finite and positive")
    return x


def nb_log_pmf(y, lam, phi):
    """Negative binomial log p.m.f. with mean ``lam`` and size ``phi``.

    The variance is ``lam + lam**2 / phi``; ``phi -> inf`` gives a Poisson.
    """
    lam = _check_positive("lambda", lam)
    phi = _check_positive("phi", phi)
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise InvalidParameter("counts must be non-negative")
    out = (
        gammaln(y + phi)
        - gammaln(y + 1.0)
        - gammaln(phi)
        - phi * np.log1p(lam / phi)
        + y * (np.log(lam) - np.log(lam + phi))
    )
    return out if out.ndim else float(out)


def nb_log_pmf_zero(lam, phi):
    """``log NB(0; lam, phi)`` without argument checks, for inner loops."""
    return -phi * np.log1p(lam / phi)


def zinb_entry_log_lik(y, alpha, eta, phi, s):
    """Log-likelihood of one (or many) entries given the zero-inflation flag.

    A structural zero (``eta == 1``) contributes ``log 1 = 0``; otherwise the
    entry follows ``NB(s * alpha, phi)``.
    """
    y = np.asarray(y)
    eta = np.asarray(eta).astype(bool)
    if np.any(eta & (y > 0)):
        raise InconsistentState("structural zero flagged on a positive count")
    ll = nb_log_pmf(y, np.asarray(s, dtype=float) * np.asarray(alpha, dtype=float), phi)
    out = np.where(eta, 0.0, ll)
    return out if out.ndim else float(out)


def dm_row_log_lik(y_row, alpha_row):
    """Dirichlet-multinomial log p.m.f. of count vector(s) along the last axis."""
    alpha = _check_positive("alpha", alpha_row)
    y = np.asarray(y_row, dtype=float)
    Y = y.sum(axis=-1)
    A = alpha.sum(axis=-1)
    out = (
        gammaln(Y + 1.0)
        + gammaln(A)
        - gammaln(Y + A)
        + np.sum(gammaln(y + alpha) - gammaln(y + 1.0) - gammaln(alpha), axis=-1)
    )
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class TopLevelHyper:
    """Normal / inverse-gamma hyperparameters; index 0 is the pooled model.

    ``a[k]``, ``b[k]`` are the inverse-gamma shape and scale of the variance
    and ``h[k]`` scales the prior variance of the mean for group ``k``.
    """

    a: tuple
    b: tuple
    h: tuple

    def __post_init__(self):
        for name in ("a", "b", "h"):
            v = tuple(float(x) for x in getattr(self, name))
            if not all(np.isfinite(x) and x > 0 for x in v):
                raise InvalidParameter(f"{name} must be strictly positive")
            object.__setattr__(self, name, v)
        if not len(self.a) == len(self.b) == len(self.h) >= 2:
            raise InvalidParameter("a, b, h need K + 1 entries each")

    @classmethod
    def default(cls, K, a=2.0, b=1.0, h=100.0):
        return cls((a,) * (K + 1), (b,) * (K + 1), (h,) * (K + 1))

    @property
    def K(self):
        return len(self.a) - 1

    def arrays(self):
        return np.array(self.a), np.array(self.b), np.array(self.h)


def normal_ig_log_marginal(n, s1, s2, a, b, h):
    """Log marginal density of ``n`` normal draws with sum ``s1`` and sum of
    squares ``s2`` after integrating out ``mu ~ N(0, h sigma^2)`` and
    ``sigma^2 ~ IG(a, b)``. Broadcasts over all arguments."""
    n = np.asarray(n, dtype=float)
    q = s2 - s1 * s1 / (n + 1.0 / h)
    return (
        -0.5 * n * LOG_2PI
        - 0.5 * np.log(n * h + 1.0)
        + gammaln(a + 0.5 * n)
        - gammaln(a)
        + a * np.log(b)
        - (a + 0.5 * n) * np.log(b + 0.5 * q)
    )


def marginal_feature_log_lik(log_alpha_col, codes, gamma_j, hyper: TopLevelHyper):
    """Log marginal likelihood of one column of ``log alpha``.

    ``codes`` are zero-based group indices. With ``gamma_j == 1`` each
    group has its own mean and variance; with ``gamma_j == 0`` all samples
    share one.
    """
    x = np.asarray(log_alpha_col, dtype=float)
    codes = np.asarray(getattr(codes, "codes", codes))
    if not np.all(np.isfinite(x)):
        raise InvalidParameter("log alpha must be finite")
    a, b, h = hyper.arrays()
    if not gamma_j:
        return float(normal_ig_log_marginal(x.size, x.sum(), x @ x, a[0], b[0], h[0]))
    total = 0.0
    for k in range(hyper.K):
        xk = x[codes == k]
        if xk.size == 0:
            raise InvalidParameter(f"group {k + 1} is empty")
        total += float(normal_ig_log_marginal(xk.size, xk.sum(), xk @ xk, a[k + 1], b[k + 1], h[k + 1]))
    return total


def group_sums(log_alpha, codes, K):
    """Per-group sums and sums of squares of each column: shape ``(K, p)``."""
    onehot = np.zeros((K, log_alpha.shape[0]))
    onehot[codes, np.arange(log_alpha.shape[0])] = 1.0
    return onehot @ log_alpha, onehot @ (log_alpha * log_alpha)


def marginal_log_lik_columns(log_alpha, codes, hyper: TopLevelHyper):
    """Both branches of the selection-layer marginal for every column.

    Returns ``(lm0, lm1)``, the log marginals under ``gamma = 0`` and
    ``gamma = 1``.
    """
    K = hyper.K
    a, b, h = hyper.arrays()
    n = log_alpha.shape[0]
    s1, s2 = group_sums(log_alpha, codes, K)
    n_k = np.bincount(codes, minlength=K).astype(float)
    lm1 = normal_ig_log_marginal(
        n_k[:, None], s1, s2, a[1:, None], b[1:, None], h[1:, None]
    ).sum(axis=0)
    lm0 = normal_ig_log_marginal(n, s1.sum(axis=0), s2.sum(axis=0), a[0], b[0], h[0])
    return lm0, lm1
