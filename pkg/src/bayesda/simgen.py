"""Simulated and synthetic benchmark datasets plus evaluation metrics.

Three generators are provided:

* ``generate_dm``: Dirichlet-multinomial counts with depths in [5000, 10000];
* ``generate_zinb``: negative binomial counts scaled by ``s ~ U(0.5, 4)``
  with exactly half of the entries forced to zero;
* ``generate_synthetic``: two-group multinomial draws around a base count
  vector, the first ``p_gamma`` taxa boosted by ``exp(sigma)`` in one group.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .data import CountTable, GroupLabels, write_count_table, write_group_labels
from .errors import InvalidParameter, Undefined

SCHEMES = ("DM", "ZINB", "synthetic")


@dataclass(frozen=True)
class GeneratorConfig:
    """Simulation settings.

    ``null_prose=True`` draws non-discriminating ``log alpha`` from
    ``N(0, 4)`` instead of the default ``N(d_0j, sigma^2/100)`` with
    ``d_0j ~ U(0, 4)``.
    """

    scheme: str = "ZINB"
    n: int = 24
    p: int = 1000
    p_gamma: int = 50
    K: int = 2
    sigma: float = 2.0
    seed: int = 0
    base_counts: str | None = None
    null_prose: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParameter(f"scheme must be one of {SCHEMES}")
        if not 0 <= self.p_gamma <= self.p:
            raise InvalidParameter("need 0 <= p_gamma <= p")
        if not self.sigma > 0:
            raise InvalidParameter("sigma must be positive")
        if self.scheme == "synthetic":
            if self.K != 2:
                raise InvalidParameter("the synthetic scheme has two groups")
            if self.p_gamma % 2:
                raise InvalidParameter("the synthetic scheme needs an even p_gamma")
        elif self.K not in (2, 3):
            raise InvalidParameter("K must be 2 or 3")
        if self.n < 2 * self.K:
            raise InvalidParameter("need at least two samples per group")


@dataclass
class LabeledDataset:
    table: CountTable
    labels: GroupLabels
    truth: np.ndarray
    s: np.ndarray | None = None
    alpha: np.ndarray | None = None
    phi: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.int8)


def _labels(n, K):
    """Contiguous, near-equal groups ``1..K``."""
    z = np.repeat(np.arange(1, K + 1), [len(c) for c in np.array_split(np.arange(n), K)])
    return z


def _ids(prefix, m):
    return [f"{prefix}{i + 1}" for i in range(m)]


def _log_alpha(cfg: GeneratorConfig, rng, z):
    """Top-level abundances and the set of discriminating columns."""
    n, p, K, sig = cfg.n, cfg.p, cfg.K, cfg.sigma
    truth = np.zeros(p, dtype=np.int8)
    truth[rng.choice(p, size=cfg.p_gamma, replace=False)] = 1
    if cfg.null_prose:
        la = rng.normal(0.0, 2.0, size=(n, p))
    else:
        d0 = rng.uniform(0.0, 4.0, size=p)
        la = rng.normal(d0, sig / 10.0, size=(n, p))
    prog = np.array([1 - sig / 2, 1 + sig / 2]) if K == 2 else np.array([1 - sig, 1.0, 1 + sig])
    for j in np.flatnonzero(truth):
        d = rng.permutation(prog)
        la[:, j] = rng.normal(d[z - 1], sig / 10.0)
    return la, truth


def generate_dm(cfg: GeneratorConfig) -> LabeledDataset:
    if cfg.scheme != "DM":
        cfg = GeneratorConfig(**{**asdict(cfg), "scheme": "DM"})
    rng = np.random.default_rng(cfg.seed)
    z = _labels(cfg.n, cfg.K)
    la, truth = _log_alpha(cfg, rng, z)
    alpha = np.exp(la)
    N = rng.integers(5000, 10001, size=cfg.n)
    y = np.zeros((cfg.n, cfg.p), dtype=np.int64)
    for i in range(cfg.n):
        psi = rng.dirichlet(alpha[i])
        y[i] = rng.multinomial(N[i], psi / psi.sum())
    sids = _ids("S", cfg.n)
    return LabeledDataset(CountTable(y, sids, _ids("T", cfg.p)), GroupLabels(z, sids), truth,
                          alpha=alpha, extra={"depth": N})


def generate_zinb(cfg: GeneratorConfig) -> LabeledDataset:
    if cfg.scheme != "ZINB":
        cfg = GeneratorConfig(**{**asdict(cfg), "scheme": "ZINB"})
    rng = np.random.default_rng(cfg.seed)
    z = _labels(cfg.n, cfg.K)
    la, truth = _log_alpha(cfg, rng, z)
    alpha = np.exp(la)
    s = rng.uniform(0.5, 4.0, size=cfg.n)
    phi = rng.exponential(10.0, size=cfg.p)
    lam = s[:, None] * alpha
    y = rng.negative_binomial(phi[None, :], phi[None, :] / (phi[None, :] + lam))
    flat = y.reshape(-1)
    flat[rng.choice(flat.size, size=flat.size // 2, replace=False)] = 0
    sids = _ids("S", cfg.n)
    return LabeledDataset(CountTable(y, sids, _ids("T", cfg.p)), GroupLabels(z, sids), truth,
                          s=s, alpha=alpha, phi=phi)


def load_base_counts(path=None) -> np.ndarray:
    """Base abundance vector; the bundled example when ``path`` is None."""
    if path is None:
        text = resources.files("bayesda").joinpath("data/base_counts.txt").read_text()
    else:
        text = Path(path).read_text()
    vals = [float(x) for x in text.split() if x.strip()]
    O = np.asarray(vals)
    if O.ndim != 1 or O.size == 0 or np.any(O < 0):
        raise InvalidParameter("base counts must be a non-negative vector")
    return O


def generate_synthetic(cfg: GeneratorConfig, base_counts=None) -> LabeledDataset:
    """Two-group multinomial data around ``base_counts``.

    The first ``p_gamma/2`` entries of the base vector are duplicated into
    positions ``p_gamma/2 .. p_gamma``; group one boosts the first block and
    group two the second, so both groups have the same total. Columns are
    then permuted and the permutation is stored in ``extra["permutation"]``.
    """
    if cfg.scheme != "synthetic":
        cfg = GeneratorConfig(**{**asdict(cfg), "scheme": "synthetic"})
    rng = np.random.default_rng(cfg.seed)
    O = load_base_counts(cfg.base_counts) if base_counts is None else np.asarray(base_counts, float)
    h = cfg.p_gamma // 2
    if O.size < cfg.p - h:
        raise InvalidParameter(f"base vector needs at least {cfg.p - h} entries")
    O = np.concatenate((O[:h], O[:h], O[h:cfg.p - h]))
    P = O.copy()
    Q = O.copy()
    P[:h] *= np.exp(cfg.sigma)
    Q[h:2 * h] *= np.exp(cfg.sigma)
    z = _labels(cfg.n, 2)
    y = np.zeros((cfg.n, cfg.p), dtype=np.int64)
    for i in range(cfg.n):
        w = P if z[i] == 1 else Q
        y[i] = rng.multinomial(10000, w / w.sum())
    truth = np.zeros(cfg.p, dtype=np.int8)
    truth[:2 * h] = 1
    perm = rng.permutation(cfg.p)
    sids = _ids("S", cfg.n)
    return LabeledDataset(CountTable(y[:, perm], sids, _ids("T", cfg.p)), GroupLabels(z, sids),
                          truth[perm], extra={"permutation": perm, "P": P, "Q": Q})


def generate(cfg: GeneratorConfig) -> LabeledDataset:
    if cfg.scheme == "DM":
        return generate_dm(cfg)
    if cfg.scheme == "ZINB":
        return generate_zinb(cfg)
    return generate_synthetic(cfg)


def write_dataset(ds: LabeledDataset, out_dir, cfg: GeneratorConfig | None = None):
    """Counts, labels, truth and a JSON sidecar of the true parameters."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_count_table(ds.table, out / "counts.tsv")
    write_group_labels(ds.labels, out / "labels.tsv")
    with open(out / "truth.tsv", "w") as fh:
        fh.write("taxon_id\tdiscriminating\n")
        for t, g in zip(ds.table.taxon_ids, ds.truth):
            fh.write(f"{t}\t{int(g)}\n")
    side = {"config": asdict(cfg) if cfg else None}
    if ds.s is not None:
        side["s"] = dict(zip(ds.table.sample_ids, map(float, ds.s)))
    if ds.phi is not None:
        side["phi"] = dict(zip(ds.table.taxon_ids, map(float, ds.phi)))
    if ds.alpha is not None:
        side["log_alpha"] = np.log(ds.alpha).round(10).tolist()
    if "permutation" in ds.extra:
        side["permutation"] = ds.extra["permutation"].tolist()
    (out / "truth.json").write_text(json.dumps(side, indent=1))


def read_truth(path) -> dict:
    """Map taxon id to the 0/1 truth flag from a ``truth.tsv`` file."""
    out = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            if line.strip():
                t, g = line.rstrip("\n").split("\t")
                out[t] = int(g)
    return out


# --------------------------------------------------------------------------
# metrics


def auc(scores, truth) -> float:
    """Area under the ROC curve via the rank-sum identity (ties averaged)."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth).astype(bool)
    n1 = truth.sum()
    n0 = truth.size - n1
    if n1 == 0 or n0 == 0:
        raise Undefined("AUC needs both classes in the truth vector")
    r = stats.rankdata(scores)
    return float((r[truth].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def mcc(selected, truth) -> float:
    """Matthews correlation; zero when any marginal count vanishes."""
    sel = np.asarray(selected).astype(bool)
    tr = np.asarray(truth).astype(bool)
    tp = float(np.sum(sel & tr))
    tn = float(np.sum(~sel & ~tr))
    fp = float(np.sum(sel & ~tr))
    fn = float(np.sum(~sel & tr))
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(den))


def bh_adjust(p):
    """Benjamini-Hochberg step-up adjusted p-values."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return p
    return stats.false_discovery_control(p, method="bh")


def baseline_tests(table, labels: GroupLabels, method="kruskal-wallis"):
    """Per-taxon tests on within-sample proportions.

    Returns ``(p_values, bh_adjusted)``. Taxa that are constant across all
    samples get p-value one.
    """
    y = np.asarray(getattr(table, "counts", table), dtype=float)
    tot = y.sum(axis=1, keepdims=True)
    if np.any(tot <= 0):
        raise InvalidParameter("every sample needs reads to form proportions")
    x = y / tot
    z = labels.z
    groups = [x[z == k] for k in range(1, labels.K + 1)]
    p = np.ones(x.shape[1])
    const = np.ptp(x, axis=0) == 0
    live = np.flatnonzero(~const)
    if method in ("anova", "ANOVA"):
        with np.errstate(all="ignore"):
            res = stats.f_oneway(*[g[:, live] for g in groups], axis=0)
        pv = np.asarray(res.pvalue, dtype=float)
        p[live] = np.where(np.isfinite(pv), pv, 1.0)
    elif method in ("kruskal-wallis", "kruskal", "kw", "KW"):
        for j in live:
            p[j] = stats.kruskal(*[g[:, j] for g in groups]).pvalue
    else:
        raise InvalidParameter(f"unknown test {method!r}")
    return p, bh_adjust(p)
