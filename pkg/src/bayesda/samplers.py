"""MCMC state and transition kernels.

Every kernel mutates the chain state in place and returns it. Randomness
comes only from the ``numpy.random.Generator`` handed in, so a chain is a
deterministic function of its seed.

Indices are zero-based internally: DPP component labels ``g`` run over
``0..M-1`` and group codes over ``0..K-1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from . import _kernels
from .data import GroupLabels, TaxonomyTree
from .errors import InvalidParameter, ModelMismatch
from .likelihoods import TopLevelHyper, group_sums, marginal_log_lik_columns

LOG_2PI = np.log(2.0 * np.pi)


# --------------------------------------------------------------------------
# configuration objects


@dataclass(frozen=True)
class ProposalScales:
    """Random-walk scales.

    ``tau_phi`` is the variance of the gamma proposal for the dispersions;
    ``None`` means "use the current value", which makes the proposal
    variance state dependent. ``tau_s`` is the standard deviation of the
    normal step on ``log s`` and ``tau_alpha`` that of the step on ``alpha``.
    ``tau_shift`` scales the joint size-factor/abundance translation and
    ``tau_block`` the group-wise block moves on ``log alpha``; ``None``
    switches either move off.
    """

    tau_phi: float | None = None
    tau_s: float = 0.1
    tau_alpha: float = 0.5
    alpha_walk: str = "linear"
    tau_shift: float | None = 0.2
    tau_block: float | None = 0.5

    def __post_init__(self):
        if self.alpha_walk not in ("linear", "log"):
            raise InvalidParameter("alpha_walk must be 'linear' or 'log'")
        for name in ("tau_phi", "tau_s", "tau_alpha", "tau_shift", "tau_block"):
            v = getattr(self, name)
            if v is None and name in ("tau_phi", "tau_shift", "tau_block"):
                continue
            if not (np.isfinite(v) and v > 0):
                raise InvalidParameter(f"{name} must be strictly positive")


@dataclass(frozen=True)
class BottomPriors:
    """Priors of the zero-inflated count layer."""

    a_pi: float = 1.0
    b_pi: float = 1.0
    a_phi: float = 0.001
    b_phi: float = 0.001

    def __post_init__(self):
        for name in ("a_pi", "b_pi", "a_phi", "b_phi"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be strictly positive")


@dataclass(frozen=True)
class DppHyper:
    """Hyperparameters of the mixture prior on ``log s``.

    ``tau_nu`` is the prior standard deviation of the component locations.
    """

    M: int
    sigma_s: float = 1.0
    c_s: float = 0.0
    tau_nu: float = 1.0
    a_t: float = 1.0
    b_t: float = 1.0
    a_m: float = 1.0
    b_m: float = 1.0

    def __post_init__(self):
        if int(self.M) < 1:
            raise InvalidParameter("M must be at least 1")
        object.__setattr__(self, "M", int(self.M))
        for name in ("sigma_s", "tau_nu", "a_t", "b_t", "a_m", "b_m"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be strictly positive")

    @classmethod
    def default(cls, n, **kw):
        return cls(M=max(1, n // 2), **kw)


def stick_breaking(V):
    """Weights ``psi_m = V_m * prod_{l<m} (1 - V_l)``.

    The last stick ``V_M`` is expected to be one so that the weights sum to
    one exactly.
    """
    V = np.asarray(V, dtype=float)
    rest = np.concatenate(([1.0], np.cumprod(1.0 - V[:-1])))
    return V * rest


@dataclass
class DppState:
    g: np.ndarray
    epsilon: np.ndarray
    t: np.ndarray
    nu: np.ndarray
    V: np.ndarray
    psi: np.ndarray
    hyper: DppHyper

    @classmethod
    def from_prior(cls, n, hyper: DppHyper, rng):
        M = hyper.M
        V = rng.beta(hyper.a_m, hyper.b_m, size=M)
        V[-1] = 1.0
        psi = stick_breaking(V)
        t = rng.beta(hyper.a_t, hyper.b_t, size=M)
        nu = rng.normal(0.0, hyper.tau_nu, size=M)
        g = rng.choice(M, size=n, p=psi)
        eps = (rng.random(n) < t[g]).astype(np.int8)
        return cls(g, eps, t, nu, V, psi, hyper)

    def inner_means(self):
        """``(M, 2)`` array of the branch means, column 0 for ``epsilon = 0``."""
        h = self.hyper
        t, nu = self.t, self.nu
        return np.column_stack(((h.c_s - t * nu) / (1.0 - t), nu))

    def prior_mean_log_s(self):
        """Mean of ``log s`` under the current mixture; ``c_s`` by construction."""
        m = self.inner_means()
        return float(np.sum(self.psi * (self.t * m[:, 1] + (1.0 - self.t) * m[:, 0])))

    def assigned_means(self):
        return self.inner_means()[self.g, self.epsilon]


@dataclass(frozen=True)
class SelectionPrior:
    """Prior on the selection indicators.

    ``kind`` is ``"beta-bernoulli"`` (``omega`` integrated out),
    ``"bernoulli"`` (fixed ``omega``) or ``"mrf"`` (logistic in the number
    of selected tree neighbours; needs a tree).
    """

    kind: str = "beta-bernoulli"
    a_omega: float = 0.2
    b_omega: float = 1.8
    omega: float = 0.1
    d: float = -2.2
    f: float = 0.5
    tree: TaxonomyTree | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("beta-bernoulli", "bernoulli", "mrf"):
            raise InvalidParameter(f"unknown selection prior {self.kind!r}")
        if self.kind == "beta-bernoulli" and not (self.a_omega > 0 and self.b_omega > 0):
            raise InvalidParameter("a_omega and b_omega must be positive")
        if self.kind == "bernoulli" and not 0 < self.omega < 1:
            raise InvalidParameter("omega must lie in (0, 1)")
        if self.kind == "mrf" and self.tree is None:
            raise InvalidParameter("the MRF prior needs a taxonomy tree")

    def log_flip_ratio(self, to_one, k=0, p=1, n_neighbors=0):
        """Log prior ratio for flipping one indicator.

        ``k`` is the number of selected features at the level before the
        flip and ``p`` the level size; ``n_neighbors`` counts the selected
        direct neighbours in the tree.
        """
        if self.kind == "beta-bernoulli":
            a, b = self.a_omega, self.b_omega
            if to_one:
                return float(np.log(a + k) - np.log(b + p - k - 1))
            return float(np.log(b + p - k) - np.log(a + k - 1))
        if self.kind == "bernoulli":
            lo = float(np.log(self.omega) - np.log1p(-self.omega))
        else:
            lo = self.d + self.f * n_neighbors
        return lo if to_one else -lo


# --------------------------------------------------------------------------
# data and state


@dataclass
class ModelData:
    """Everything a chain reads but never writes.

    ``y[l]`` is the ``n x p_l`` count matrix at level ``l + 1``;
    ``up[l]`` maps level ``l + 1`` columns to level ``l + 2``;
    ``desc[l]`` maps bottom-level columns to level ``l + 1``.
    """

    y: list
    codes: np.ndarray
    K: int
    sample_ids: tuple = ()
    taxon_ids: list = field(default_factory=list)
    up: list = field(default_factory=list)
    desc: list = field(default_factory=list)
    children: list = field(default_factory=list)
    parent: list = field(default_factory=list)

    def __post_init__(self):
        self.y = [np.ascontiguousarray(np.asarray(y), dtype=np.int64) for y in self.y]
        self.yf = [y.astype(float) for y in self.y]
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.n_k = np.bincount(self.codes, minlength=self.K).astype(float)
        if np.any(self.n_k == 0):
            raise InvalidParameter("every group needs at least one sample")
        if np.any(self.n_k == 1):
            warnings.warn("a group has a single sample; its variance is prior driven", stacklevel=2)
        self.zero = [y == 0 for y in self.y]
        self.row_totals = [y.sum(axis=1).astype(float) for y in self.y]
        if not self.taxon_ids:
            self.taxon_ids = [tuple(f"T{j + 1}" for j in range(y.shape[1])) for y in self.y]
        if not self.desc:
            d = np.eye(self.y[0].shape[1])
            self.desc = [d]
            for U in self.up:
                d = d @ U
                self.desc.append(d)
        if not self.children:
            self.children = [[np.zeros(0, dtype=np.int64)] * y.shape[1] for y in self.y]
            self.parent = [np.full(y.shape[1], -1, dtype=np.int64) for y in self.y]

    @property
    def n(self):
        return self.y[0].shape[0]

    @property
    def L(self):
        return len(self.y)

    def p(self, level=1):
        return self.y[level - 1].shape[1]

    @classmethod
    def from_tables(cls, tables, labels: GroupLabels, tree: TaxonomyTree | None = None):
        """Build from per-level tables (see ``data.level_tables``)."""
        lab = labels.align(tables[0].sample_ids) if labels.sample_ids else labels
        kw = dict(
            y=[t.counts for t in tables],
            codes=lab.codes,
            K=lab.K,
            sample_ids=tables[0].sample_ids,
            taxon_ids=[t.taxon_ids for t in tables],
        )
        if tree is not None and len(tables) > 1:
            kw["up"] = [tree.indicator(l) for l in range(1, len(tables))]
            nb = [tree.neighbor_lists(l) for l in range(1, len(tables) + 1)]
            kw["children"] = [c for c, _ in nb]
            kw["parent"] = [p for _, p in nb]
        return cls(**kw)


@dataclass
class ChainState:
    alpha: list
    log_alpha: list
    gamma: list

    model = "base"

    def copy(self):
        import copy

        return copy.deepcopy(self)


@dataclass
class DmState(ChainState):
    model = "DM"


@dataclass
class ZinbState(ChainState):
    s: np.ndarray = None
    phi: list = None
    eta: np.ndarray = None
    pi: np.ndarray = None
    dpp: DppState | None = None
    fixed_s: bool = False

    model = "ZINB"

    def eta_at(self, data: ModelData, level):
        """Structural-zero flags at ``level``: all bottom descendants flagged."""
        if level == 1:
            return self.eta
        live = (~self.eta).astype(float) @ data.desc[level - 1]
        return live == 0


def _check_zinb(state):
    if not isinstance(state, ZinbState):
        raise ModelMismatch("this kernel applies to the zero-inflated model only")


# --------------------------------------------------------------------------
# initial values


def initial_state(data: ModelData, model, rng, s_fixed=None, dpp_hyper: DppHyper | None = None,
                  priors: BottomPriors = BottomPriors(), gamma_init=0.05):
    """Starting point of a chain.

    ``alpha`` starts at the TSS-scaled counts plus one half, a random 5% of
    the indicators at each level start at one, dispersions start at 10 and
    zeros are flagged structural with probability one half.
    """
    n = data.n
    tot = data.row_totals[0]
    if np.any(tot <= 0):
        raise InvalidParameter("every sample needs at least one read")
    s_tss = np.exp(np.log(tot) - np.log(tot).mean())
    gamma = []
    for l in range(data.L):
        p = data.p(l + 1)
        g = np.zeros(p, dtype=np.int8)
        k = int(round(gamma_init * p))
        if k:
            g[rng.choice(p, size=k, replace=False)] = 1
        gamma.append(g)
    alpha0 = data.yf[0] / s_tss[:, None] + 0.5
    if model == "DM":
        alpha = [alpha0]
        for U in data.up:
            alpha.append(alpha[-1] @ U)
        return DmState(alpha, [np.log(a) for a in alpha], gamma)
    if model != "ZINB":
        raise InvalidParameter(f"unknown model {model!r}")
    alpha = [alpha0] + [data.yf[l] / s_tss[:, None] + 0.5 for l in range(1, data.L)]
    eta = data.zero[0] & (rng.random(data.y[0].shape) < 0.5)
    pi = rng.beta(priors.a_pi, priors.b_pi, size=n)
    phi = [np.full(data.p(l + 1), 10.0) for l in range(data.L)]
    if s_fixed is None:
        hyper = dpp_hyper or DppHyper.default(n)
        dpp = DppState.from_prior(n, hyper, rng)
        s, fixed = s_tss.copy(), False
    else:
        s = np.asarray(s_fixed, dtype=float).copy()
        if s.shape != (n,) or np.any(s <= 0):
            raise InvalidParameter("fixed size factors must be positive, one per sample")
        dpp, fixed = None, True
    return ZinbState(alpha, [np.log(a) for a in alpha], gamma, s=s, phi=phi, eta=eta, pi=pi,
                     dpp=dpp, fixed_s=fixed)


# --------------------------------------------------------------------------
# bottom layer


def eta_inclusion_prob(pi, lam, phi):
    """``P(eta = 1 | y = 0)`` for a zero entry."""
    log_nb0 = -phi * np.log1p(lam / phi)
    with np.errstate(divide="ignore"):
        logit = np.log(pi) - np.log1p(-pi) - log_nb0
    return expit(logit)


def update_eta(state: ZinbState, data: ModelData, rng):
    _check_zinb(state)
    lam = state.s[:, None] * state.alpha[0]
    prob = eta_inclusion_prob(state.pi[:, None], lam, state.phi[0][None, :])
    u = rng.random(lam.shape)
    state.eta = data.zero[0] & (u < prob)
    return state


def update_pi(state: ZinbState, data: ModelData, rng, priors: BottomPriors = BottomPriors()):
    _check_zinb(state)
    k = state.eta.sum(axis=1)
    p = state.eta.shape[1]
    state.pi = rng.beta(priors.a_pi + k, priors.b_pi + p - k)
    return state


def _nb_lambda_part(y, lam, phi):
    """Terms of the NB log p.m.f. that involve ``lam``."""
    return -phi * np.log1p(lam / phi) + y * (np.log(lam) - np.log(lam + phi))


def _gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def phi_log_accept_ratio(y, lam, active, phi, phi_new, priors: BottomPriors = BottomPriors(),
                         tau_phi=None):
    """Log Metropolis-Hastings ratio for moving one dispersion to ``phi_new``.

    ``y``, ``lam`` and ``active`` are the column's counts, means and
    non-structural flags. With ``tau_phi=None`` the gamma proposal has mean
    and variance equal to the current point in each direction.
    """
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    active = np.asarray(active, dtype=bool)
    phi = np.asarray(phi, dtype=float)
    phi_new = np.asarray(phi_new, dtype=float)

    def loglik(f):
        ll = gammaln(y + f) - gammaln(f) + _nb_lambda_part(y, lam, f)
        return np.sum(np.where(active, ll, 0.0), axis=0)

    tau_f = phi if tau_phi is None else tau_phi
    tau_r = phi_new if tau_phi is None else tau_phi
    log_q_fwd = _gamma_logpdf(phi_new, phi * phi / tau_f, phi / tau_f)
    log_q_rev = _gamma_logpdf(phi, phi_new * phi_new / tau_r, phi_new / tau_r)
    log_prior = (priors.a_phi - 1.0) * (np.log(phi_new) - np.log(phi)) - priors.b_phi * (phi_new - phi)
    return loglik(phi_new) - loglik(phi) + log_prior + log_q_rev - log_q_fwd


def update_phi(state: ZinbState, data: ModelData, level, rng, scales=ProposalScales(),
               priors: BottomPriors = BottomPriors()):
    _check_zinb(state)
    l = level - 1
    phi = state.phi[l]
    tau = phi if scales.tau_phi is None else np.full_like(phi, scales.tau_phi)
    prop = rng.gamma(phi * phi / tau, tau / phi)
    logu = np.log(rng.random(phi.size))
    ok = np.isfinite(prop) & (prop > 0)
    safe = np.where(ok, prop, phi)
    lam = state.s[:, None] * state.alpha[l]
    active = ~state.eta_at(data, level)
    with np.errstate(all="ignore"):
        r = phi_log_accept_ratio(data.yf[l], lam, active, phi, safe, priors, scales.tau_phi)
    accept = ok & np.isfinite(r) & (logu < r)
    state.phi[l] = np.where(accept, safe, phi)
    return state


def s_log_accept_ratio(y_row, alpha_row, active_row, phi, s, s_new, prior_mean, sigma_s=1.0,
                       likelihood=True):
    """Log MH ratio for moving one size factor from ``s`` to ``s_new``.

    The step is symmetric on ``log s`` so no proposal term appears. Row
    arguments may carry a leading sample axis; ``s``, ``s_new`` and
    ``prior_mean`` are then per-sample vectors.
    """
    s = np.asarray(s, dtype=float)
    s_new = np.asarray(s_new, dtype=float)
    x, x_new = np.log(s), np.log(s_new)
    r = -((x_new - prior_mean) ** 2 - (x - prior_mean) ** 2) / (2.0 * sigma_s**2)
    if likelihood:
        y = np.asarray(y_row, dtype=float)
        a = np.asarray(alpha_row, dtype=float)
        d = (_nb_lambda_part(y, s_new[..., None] * a, phi)
             - _nb_lambda_part(y, s[..., None] * a, phi))
        r = r + np.sum(np.where(active_row, d, 0.0), axis=-1)
    return r


def update_s(state: ZinbState, data: ModelData, rng, scales=ProposalScales(), likelihood=True):
    """Random walk on ``log s`` under the current mixture assignment.

    ``likelihood=False`` samples from the prior alone.
    """
    _check_zinb(state)
    if state.fixed_s:
        return state
    n = state.s.size
    s_new = np.exp(np.log(state.s) + scales.tau_s * rng.standard_normal(n))
    logu = np.log(rng.random(n))
    r = s_log_accept_ratio(data.yf[0], state.alpha[0], ~state.eta, state.phi[0], state.s, s_new,
                           state.dpp.assigned_means(), state.dpp.hyper.sigma_s, likelihood)
    state.s = np.where(logu < r, s_new, state.s)
    return state


def _selected_marginal_total(log_alpha, gamma, codes, hyper, shift=0.0):
    lm0, lm1 = marginal_log_lik_columns(log_alpha - shift, codes, hyper)
    return float(np.sum(np.where(gamma == 1, lm1, lm0)))


def update_scale(state: ZinbState, data: ModelData, rng, hyper: TopLevelHyper,
                 scales=ProposalScales()):
    """Joint shift ``log s + c`` and ``log alpha - c`` at every level.

    The count means ``s * alpha`` are unchanged, so only the size-factor
    prior and the selection layer enter the ratio. The move is a
    translation in log coordinates and so needs no Jacobian. It lets the
    overall scale, which the counts cannot pin down, mix quickly.
    Returns whether the move was accepted.
    """
    _check_zinb(state)
    if state.fixed_s or state.dpp is None or scales.tau_shift is None:
        return False
    c = scales.tau_shift * rng.standard_normal()
    lu = np.log(rng.random())
    x = np.log(state.s)
    m = state.dpp.assigned_means()
    sig = state.dpp.hyper.sigma_s
    r = -np.sum((x + c - m) ** 2 - (x - m) ** 2) / (2.0 * sig**2)
    for l in range(data.L):
        la, g = state.log_alpha[l], state.gamma[l]
        r += (_selected_marginal_total(la, g, data.codes, hyper, c)
              - _selected_marginal_total(la, g, data.codes, hyper))
    if not lu < r:
        return False
    state.s = state.s * np.exp(c)
    for l in range(data.L):
        state.log_alpha[l] = state.log_alpha[l] - c
        state.alpha[l] = np.exp(state.log_alpha[l])
    return True


# --------------------------------------------------------------------------
# mixture prior on log s


def _norm_logpdf(x, mean, sd):
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def dpp_nu_moments(x, g, eps, t, m, c_s=0.0):
    """Sufficient quantities ``(c_m, e_m)`` for the location of component ``m``.

    Members on the ``epsilon = 1`` branch see mean ``nu``; the others see
    ``c_s/(1-t) - r nu`` with ``r = t/(1-t)``.
    """
    x = np.asarray(x, dtype=float)
    in1 = (g == m) & (eps == 1)
    in0 = (g == m) & (eps == 0)
    r = t / (1.0 - t)
    c = x[in1].sum() - r * np.sum(x[in0] - c_s / (1.0 - t))
    e = in1.sum() + in0.sum() * r * r
    return float(c), float(e)


def dpp_update_assignments(dpp: DppState, x, rng):
    """Joint Gibbs draw of ``(g_i, epsilon_i)`` for every sample."""
    h = dpp.hyper
    M = h.M
    n = x.size
    means = dpp.inner_means()
    with np.errstate(divide="ignore"):
        logw = (np.log(dpp.psi)[None, :, None]
                + np.log(np.column_stack((1.0 - dpp.t, dpp.t)))[None, :, :]
                + _norm_logpdf(x[:, None, None], means[None, :, :], h.sigma_s))
    logw = logw.reshape(n, 2 * M)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    cdf = np.cumsum(w, axis=1)
    u = rng.random(n) * cdf[:, -1]
    pick = np.minimum((cdf < u[:, None]).sum(axis=1), 2 * M - 1)
    dpp.g = pick // 2
    dpp.epsilon = (pick % 2).astype(np.int8)
    return dpp


def dpp_update_t(dpp: DppState, x, rng):
    """Update ``t_m`` given assignments and locations.

    The Beta draw ignores how ``t_m`` shifts the ``epsilon = 0`` mean, so
    it serves as an independence proposal, corrected by a Metropolis step
    on that branch's normal densities.
    """
    h = dpp.hyper
    M = h.M
    n1 = np.bincount(dpp.g[dpp.epsilon == 1], minlength=M)
    n0 = np.bincount(dpp.g[dpp.epsilon == 0], minlength=M)
    t_prop = np.clip(rng.beta(h.a_t + n1, h.b_t + n0), 1e-12, 1.0 - 1e-12)
    logu = np.log(rng.random(M))
    for m in range(M):
        sel = x[(dpp.g == m) & (dpp.epsilon == 0)]
        if sel.size == 0:
            dpp.t[m] = t_prop[m]
            continue
        mo = (h.c_s - dpp.t[m] * dpp.nu[m]) / (1.0 - dpp.t[m])
        mn = (h.c_s - t_prop[m] * dpp.nu[m]) / (1.0 - t_prop[m])
        r = np.sum(_norm_logpdf(sel, mn, h.sigma_s) - _norm_logpdf(sel, mo, h.sigma_s))
        if logu[m] < r:
            dpp.t[m] = t_prop[m]
    return dpp


def dpp_nu_conditional(dpp: DppState, x, m):
    """Mean and standard deviation of the normal full conditional of ``nu_m``."""
    h = dpp.hyper
    c, e = dpp_nu_moments(x, dpp.g, dpp.epsilon, dpp.t[m], m, h.c_s)
    prec = e / h.sigma_s**2 + 1.0 / h.tau_nu**2
    return (c / h.sigma_s**2) / prec, 1.0 / np.sqrt(prec)


def dpp_update_nu(dpp: DppState, x, rng):
    z = rng.standard_normal(dpp.hyper.M)
    for m in range(dpp.hyper.M):
        mu, sd = dpp_nu_conditional(dpp, x, m)
        dpp.nu[m] = mu + sd * z[m]
    return dpp


def dpp_update_weights(dpp: DppState, rng):
    """Stick fractions ``V_m`` given the counts, then ``psi`` by stick-breaking."""
    h = dpp.hyper
    cnt = np.bincount(dpp.g, minlength=h.M)
    above = cnt[::-1].cumsum()[::-1] - cnt
    V = rng.beta(h.a_m + cnt, h.b_m + above)
    V[-1] = 1.0
    dpp.V = V
    dpp.psi = stick_breaking(V)
    return dpp


def update_dpp(state: ZinbState, rng, x=None):
    """Refresh the mixture variables ``g, epsilon, t, nu`` and the weights.

    ``x`` defaults to the current ``log s``.
    """
    _check_zinb(state)
    dpp = state.dpp
    if dpp is None:
        return state
    x = np.log(state.s) if x is None else np.asarray(x, dtype=float)
    dpp_update_assignments(dpp, x, rng)
    dpp_update_t(dpp, x, rng)
    dpp_update_nu(dpp, x, rng)
    dpp_update_weights(dpp, rng)
    return state


# --------------------------------------------------------------------------
# abundances


def _column_caches(log_alpha, codes, K):
    S1, S2 = group_sums(log_alpha, codes, K)
    return (np.ascontiguousarray(S1), np.ascontiguousarray(S2),
            S1.sum(axis=0), S2.sum(axis=0))


def update_alpha(state: ChainState, data: ModelData, level, rng, hyper: TopLevelHyper,
                 scales=ProposalScales()):
    """Entry-wise random walk on ``alpha`` at one level.

    Returns the number of accepted moves. Proposals at or below zero are
    rejected without evaluating the target.
    """
    l = level - 1
    if state.model == "DM" and level != 1:
        raise InvalidParameter("upper-level DM abundances are aggregated, not sampled")
    alpha, log_alpha = state.alpha[l], state.log_alpha[l]
    noise = scales.tau_alpha * rng.standard_normal(alpha.shape)
    logu = np.log(rng.random(alpha.shape))
    S1, S2, T1, T2 = _column_caches(log_alpha, data.codes, data.K)
    a, b, h = hyper.arrays()
    args = (data.codes, state.gamma[l], S1, S2, T1, T2, data.n_k, float(data.n), a, b, h, noise, logu,
            scales.alpha_walk == "log")
    if state.model == "DM":
        A = alpha.sum(axis=1)
        return _kernels.alpha_sweep_dm(alpha, log_alpha, data.yf[l], data.row_totals[l], A, *args)
    active = np.ascontiguousarray(~state.eta_at(data, level))
    return _kernels.alpha_sweep_zinb(alpha, log_alpha, data.yf[l], active, state.s, state.phi[l], *args)


def _group_block_proposal(la_k, delta, kind):
    """Translate (``shift``) or rescale about the group mean (``scale``)."""
    if kind == "shift":
        return la_k + delta, np.zeros_like(delta)
    m = la_k.mean(axis=0)
    # x -> m + c (x - m) has determinant c**(n_k - 1)
    return m + np.exp(delta) * (la_k - m), (la_k.shape[0] - 1) * delta


def update_alpha_blocks(state: ZinbState, data: ModelData, level, rng, hyper: TopLevelHyper,
                        scales=ProposalScales()):
    """Group-wise block moves on the columns of ``log alpha``.

    For every group and every column, the group's ``log alpha`` values are
    first translated by a common step and then spread out or contracted
    about their mean. Both moves are symmetric in the step, so the ratio is
    likelihood x selection-layer marginal x Jacobian. Columns are updated
    in parallel since their targets factor given the rest of the state.
    Returns the number of accepted column moves.
    """
    _check_zinb(state)
    if scales.tau_block is None:
        return 0
    l = level - 1
    active = ~state.eta_at(data, level)
    y, phi, g = data.yf[l], state.phi[l], state.gamma[l]
    accepted = 0
    for k in range(data.K):
        rows = data.codes == k
        if rows.sum() < 2:
            continue
        for kind in ("shift", "scale"):
            la = state.log_alpha[l]
            delta = scales.tau_block * rng.standard_normal(la.shape[1])
            lu = np.log(rng.random(la.shape[1]))
            new_k, logjac = _group_block_proposal(la[rows], delta, kind)
            prop = la.copy()
            prop[rows] = new_k
            lm0, lm1 = marginal_log_lik_columns(la, data.codes, hyper)
            nm0, nm1 = marginal_log_lik_columns(prop, data.codes, hyper)
            r = np.where(g == 1, nm1 - lm1, nm0 - lm0) + logjac
            a_new = np.exp(new_k)
            lam_old = state.s[rows, None] * state.alpha[l][rows]
            lam_new = state.s[rows, None] * a_new
            # steps that under- or overflow alpha are rejected outright
            valid = np.all((a_new > 0) & np.isfinite(a_new), axis=0)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                part = _nb_lambda_part(y[rows], lam_new, phi) - _nb_lambda_part(y[rows], lam_old, phi)
            r += np.where(active[rows], part, 0.0).sum(axis=0)
            ok = valid & (lu < r)
            if ok.any():
                cols = np.flatnonzero(ok)
                la[np.ix_(rows, cols)] = new_k[:, cols]
                state.alpha[l][np.ix_(rows, cols)] = a_new[:, cols]
                accepted += int(ok.sum())
    return accepted


def aggregate_alpha(state: ChainState, data: ModelData, level):
    """Set ``alpha`` at ``level`` to the sum over bottom-level descendants."""
    if state.model != "DM":
        raise ModelMismatch("abundance aggregation holds for the Dirichlet-multinomial model only")
    if level < 2:
        raise InvalidParameter("aggregation targets levels above the bottom")
    state.alpha[level - 1] = state.alpha[0] @ data.desc[level - 1]
    state.log_alpha[level - 1] = np.log(state.alpha[level - 1])
    return state


# --------------------------------------------------------------------------
# selection


def selected_neighbors(gamma, data: ModelData, level, j):
    l = level - 1
    cnt = 0
    if l > 0:
        cnt += int(gamma[l - 1][data.children[l][j]].sum())
    par = data.parent[l][j]
    if par >= 0:
        cnt += int(gamma[l + 1][par])
    return cnt


def observed_marginals(log_alpha, observed, codes, hyper: TopLevelHyper):
    """Selection-layer log marginals with unobserved entries integrated out.

    Entries where ``observed`` is False carry no likelihood information, so
    their ``log alpha`` can be integrated out of the normal / inverse-gamma
    model exactly, leaving the same closed form over the remaining entries.
    Returns ``(lm0, lm1)`` per column.
    """
    from .likelihoods import normal_ig_log_marginal

    K = hyper.K
    a, b, h = hyper.arrays()
    w = observed.astype(float)
    onehot = np.zeros((K, log_alpha.shape[0]))
    onehot[codes, np.arange(log_alpha.shape[0])] = 1.0
    x = np.where(observed, log_alpha, 0.0)
    nk = onehot @ w
    s1 = onehot @ x
    s2 = onehot @ (x * x)
    lm1 = normal_ig_log_marginal(nk, s1, s2, a[1:, None], b[1:, None], h[1:, None]).sum(axis=0)
    lm0 = normal_ig_log_marginal(nk.sum(axis=0), s1.sum(axis=0), s2.sum(axis=0), a[0], b[0], h[0])
    return lm0, lm1


def impute_unobserved(state: ChainState, level, j, observed_col, codes, hyper: TopLevelHyper, rng):
    """Exact draw of the unobserved ``log alpha`` of column ``j`` given the rest."""
    l = level - 1
    miss = ~observed_col
    if not miss.any():
        return
    a, b, h = hyper.arrays()
    x = state.log_alpha[l][:, j]
    groups = [(0, np.ones(x.size, dtype=bool))] if not state.gamma[l][j] else \
        [(k + 1, codes == k) for k in range(hyper.K)]
    for idx, members in groups:
        m = members & miss
        if not m.any():
            continue
        obs = x[members & observed_col]
        prec = obs.size + 1.0 / h[idx]
        s1 = obs.sum()
        shape = a[idx] + 0.5 * obs.size
        scale = b[idx] + 0.5 * (obs @ obs - s1 * s1 / prec)
        var = scale / rng.gamma(shape)
        mu = s1 / prec + np.sqrt(var / prec) * rng.standard_normal()
        new = mu + np.sqrt(var) * rng.standard_normal(int(m.sum()))
        state.log_alpha[l][m, j] = new
        state.alpha[l][m, j] = np.exp(new)


def update_gamma(state: ChainState, data: ModelData, level, rng, hyper: TopLevelHyper,
                 prior: SelectionPrior = SelectionPrior(), repeats=20):
    """Add-delete moves on the indicators of one level.

    Under the zero-inflated model the abundances of structural zeros enter
    only the selection layer. Each move then proposes the flip together
    with a fresh draw of those abundances from their conditional, which
    makes the acceptance ratio depend on the remaining entries alone. With
    no structural zeros this is the plain add-delete move. Returns the
    number of accepted flips.
    """
    if repeats < 1:
        raise InvalidParameter("repeats must be at least 1")
    l = level - 1
    g = state.gamma[l]
    p = g.size
    if state.model == "ZINB":
        observed = ~state.eta_at(data, level)
        lm0, lm1 = observed_marginals(state.log_alpha[l], observed, data.codes, hyper)
    else:
        observed = None
        lm0, lm1 = marginal_log_lik_columns(state.log_alpha[l], data.codes, hyper)
    js = rng.integers(p, size=repeats)
    logu = np.log(rng.random(repeats))
    k = int(g.sum())
    accepted = 0
    for j, lu in zip(js, logu):
        to_one = g[j] == 0
        nb = selected_neighbors(state.gamma, data, level, j) if prior.kind == "mrf" else 0
        r = (lm1[j] - lm0[j] if to_one else lm0[j] - lm1[j]) + prior.log_flip_ratio(to_one, k, p, nb)
        if lu < r:
            g[j] = 1 if to_one else 0
            k += 1 if to_one else -1
            accepted += 1
            if observed is not None:
                impute_unobserved(state, level, j, observed[:, j], data.codes, hyper, rng)
    return accepted


def neighbor_counts(gamma, data: ModelData, level):
    """Number of selected tree neighbours of every taxon at ``level``."""
    l = level - 1
    cnt = np.zeros(data.p(level))
    if l > 0:
        cnt += gamma[l - 1].astype(float) @ data.up[l - 1]
    par = data.parent[l]
    if l + 1 < data.L:
        has = par >= 0
        cnt[has] += gamma[l + 1][par[has]]
    return cnt


def prior_log_odds(prior: SelectionPrior, gamma, data: ModelData, level):
    """Prior log odds of ``gamma_j = 1`` given all other indicators."""
    g = gamma[level - 1]
    if prior.kind == "beta-bernoulli":
        k_rest = g.sum() - g
        return np.log(prior.a_omega + k_rest) - np.log(prior.b_omega + g.size - 1 - k_rest)
    if prior.kind == "bernoulli":
        return np.full(g.size, np.log(prior.omega) - np.log1p(-prior.omega))
    return prior.d + prior.f * neighbor_counts(gamma, data, level)


def inclusion_probabilities(state: ChainState, data: ModelData, level, hyper: TopLevelHyper,
                            prior: SelectionPrior = SelectionPrior()):
    """Full conditional ``P(gamma_j = 1 | rest)`` for every taxon at ``level``.

    The abundances of structural zeros are integrated out as in
    :func:`update_gamma`. Averaging these over draws estimates the PPI
    with far less Monte Carlo noise than averaging the indicators.
    """
    l = level - 1
    if state.model == "ZINB":
        lm0, lm1 = observed_marginals(state.log_alpha[l], ~state.eta_at(data, level), data.codes, hyper)
    else:
        lm0, lm1 = marginal_log_lik_columns(state.log_alpha[l], data.codes, hyper)
    return expit(lm1 - lm0 + prior_log_odds(prior, state.gamma, data, level))


# --------------------------------------------------------------------------
# full log-likelihood (trace diagnostics)


def log_likelihood(state: ChainState, data: ModelData):
    """Bottom-level data log-likelihood of the current state."""
    from .likelihoods import dm_row_log_lik

    if state.model == "DM":
        return float(np.sum(dm_row_log_lik(data.yf[0], state.alpha[0])))
    y = data.yf[0]
    phi = state.phi[0][None, :]
    lam = state.s[:, None] * state.alpha[0]
    ll = gammaln(y + phi) - gammaln(y + 1.0) - gammaln(phi) + _nb_lambda_part(y, lam, phi)
    pi = state.pi[:, None]
    with np.errstate(divide="ignore"):
        out = np.where(state.eta, np.log(pi), np.log1p(-pi) + ll)
    return float(out.sum())
