"""Method comparison on simulated data: AUC and MCC per method.

Bayesian methods are scored by their bottom-level PPIs (Rao-Blackwellized
by default, see :func:`bayesda.inference.compute_ppi`), frequentist
baselines by ``1 - p``. MCC is computed on the ``p_gamma`` top-scoring
taxa of each method so that all methods select the same number of
features. A method that cannot run on a dataset (for instance RLE on
sparse counts) is recorded as missing rather than aborting the grid.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine, inference, simgen
from .errors import BayesDAError, InvalidParameter

METHODS = ("ZINB-DPP", "ZINB-TSS", "ZINB-Q75", "ZINB-RLE", "ZINB-TMM", "ZINB-CSS",
           "DM", "ANOVA", "KW")


def canonical_method(name: str) -> str:
    key = name.strip().upper().replace("_", "-")
    aliases = {"KRUSKAL-WALLIS": "KW", "KRUSKAL": "KW", "ZINB": "ZINB-DPP"}
    key = aliases.get(key, key)
    if key not in METHODS:
        raise InvalidParameter(f"unknown method {name!r}; choose from {METHODS}")
    return key


def top_m(scores, m):
    """Indicator of the ``m`` highest scores (ties broken by position)."""
    scores = np.asarray(scores, dtype=float)
    sel = np.zeros(scores.size, dtype=bool)
    if m > 0:
        sel[np.argsort(-scores, kind="stable")[:m]] = True
    return sel


def method_scores(ds: simgen.LabeledDataset, method: str, run: engine.RunConfig | None = None,
                  seed=0, estimator="rao-blackwell"):
    """Per-taxon scores of one method, larger meaning more discriminating.

    Raises :class:`~bayesda.errors.BayesDAError` subclasses when the method
    is not applicable to the data.
    """
    method = canonical_method(method)
    if method in ("ANOVA", "KW"):
        p, _ = simgen.baseline_tests(ds.table, ds.labels, "anova" if method == "ANOVA" else "kruskal")
        return 1.0 - p
    run = run or engine.RunConfig(chains=1)
    if method == "DM":
        cfg = replace(run, model="DM", normalization="DPP", seed=seed)
    else:
        cfg = replace(run, model="ZINB", normalization=method.split("-")[1], seed=seed)
    traces, _ = engine.run_multi((ds.table, ds.labels), None, cfg)
    return inference.compute_ppi(traces, estimator)[0]


@dataclass
class Cell:
    """Replicate-level metrics of one (setting, method) cell; NaN marks failure."""

    auc: list = field(default_factory=list)
    mcc: list = field(default_factory=list)

    @staticmethod
    def _stat(x):
        x = np.asarray([v for v in x if np.isfinite(v)], dtype=float)
        if x.size == 0:
            return math.nan, math.nan
        se = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
        return float(x.mean()), se

    @property
    def failed(self):
        return int(sum(not np.isfinite(v) for v in self.auc))

    def summary(self):
        am, ase = self._stat(self.auc)
        mm, mse = self._stat(self.mcc)
        return {"auc_mean": am, "auc_se": ase, "mcc_mean": mm, "mcc_se": mse,
                "replicates": len(self.auc), "failed": self.failed}


def evaluate(ds: simgen.LabeledDataset, methods, run: engine.RunConfig | None = None, seed=0,
             estimator="rao-blackwell"):
    """``{method: (auc, mcc)}`` for one dataset; ``(nan, nan)`` on failure."""
    out = {}
    m = int(ds.truth.sum())
    for meth in methods:
        try:
            sc = method_scores(ds, meth, run, seed, estimator)
        except BayesDAError:
            out[canonical_method(meth)] = (math.nan, math.nan)
            continue
        try:
            a = simgen.auc(sc, ds.truth)
        except BayesDAError:
            a = math.nan
        out[canonical_method(meth)] = (a, simgen.mcc(top_m(sc, m), ds.truth))
    return out


def _replicate(job):
    gcfg, methods, run, rep, estimator = job
    ds = simgen.generate(replace(gcfg, seed=gcfg.seed + rep))
    return evaluate(ds, methods, run, gcfg.seed + rep, estimator)


def run_benchmark(settings, methods=METHODS, replicates=10, run: engine.RunConfig | None = None,
                  threads=1, estimator="rao-blackwell"):
    """Evaluate ``methods`` on ``replicates`` datasets of each generator setting.

    ``settings`` is a list of :class:`~bayesda.simgen.GeneratorConfig`;
    replicate ``r`` of a setting uses generator seed ``config.seed + r``.
    Returns ``{(setting_index, method): Cell}``.
    """
    if replicates < 1:
        raise InvalidParameter("need at least one replicate")
    methods = [canonical_method(m) for m in methods]
    run = run or engine.RunConfig(chains=1)
    jobs = [(g, methods, run, r, estimator) for g in settings for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_replicate, jobs))
    else:
        results = [_replicate(j) for j in jobs]
    cells = {}
    for (g, *_), res in zip(jobs, results):
        si = settings.index(g)
        for meth, (a, m) in res.items():
            c = cells.setdefault((si, meth), Cell())
            c.auc.append(a)
            c.mcc.append(m)
    return cells


BENCH_COLUMNS = ("scheme", "n", "p", "p_gamma", "K", "sigma", "method", "auc_mean", "auc_se",
                 "mcc_mean", "mcc_se", "replicates", "failed")


def benchmark_rows(settings, cells):
    rows = []
    for (si, meth), cell in cells.items():
        g = settings[si]
        rows.append({"scheme": g.scheme, "n": g.n, "p": g.p, "p_gamma": g.p_gamma, "K": g.K,
                     "sigma": g.sigma, "method": meth, **cell.summary()})
    return rows


def write_benchmark(rows, path):
    """Tab-separated table; missing values are written as ``NA``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            vals = []
            for c in BENCH_COLUMNS:
                v = r[c]
                if isinstance(v, float) and not np.isfinite(v):
                    vals.append("NA")
                elif isinstance(v, float):
                    vals.append(repr(v))
                else:
                    vals.append(str(v))
            w.writerow(vals)


def read_benchmark(path):
    rows = []
    with open(path) as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            row = {}
            for k, v in r.items():
                if v == "NA":
                    row[k] = math.nan
                elif k in ("n", "p", "p_gamma", "K", "replicates", "failed"):
                    row[k] = int(v)
                elif k in ("scheme", "method"):
                    row[k] = v
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows
