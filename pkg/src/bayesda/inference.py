"""Posterior summaries: inclusion probabilities, Bayesian FDR selection,
fold changes and size factors."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, NotApplicable

TAXA_COLUMNS = ("level", "taxon_id", "ppi", "selected")
SAMPLE_COLUMNS = ("sample_id", "s_mean", "s_lower", "s_upper")


def _traces(traces):
    return traces if isinstance(traces, (list, tuple)) else [traces]


PPI_ESTIMATORS = ("fraction", "rao-blackwell")


def compute_ppi(traces, estimator="fraction"):
    """Per-level inclusion probabilities averaged over chains.

    ``"fraction"`` is the share of recorded draws with ``gamma_j = 1``.
    ``"rao-blackwell"`` averages the full conditional probabilities
    instead; it targets the same quantity but resolves PPIs far below
    ``1 / draws``, which matters when ranking weakly supported taxa.
    """
    traces = _traces(traces)
    if estimator not in PPI_ESTIMATORS:
        raise InvalidParameter(f"estimator must be one of {PPI_ESTIMATORS}")
    if not traces or any(t.draws < 1 for t in traces):
        raise InvalidParameter("every trace needs at least one recorded draw")
    per_chain = [t.ppi(estimator) for t in traces]
    return [np.mean([c[l] for c in per_chain], axis=0) for l in range(traces[0].L)]


def bayesian_fdr(ppis, selected):
    """Mean of ``1 - PPI`` over the selected set (0 for an empty set)."""
    ppis = np.asarray(ppis, dtype=float)
    sel = np.asarray(selected, dtype=bool)
    return float(np.mean(1.0 - ppis[sel])) if sel.any() else 0.0


def fdr_select(ppis, target=0.05):
    """Largest selection ``{j : 1 - PPI_j < c}`` with Bayesian FDR at most ``target``.

    ``ppis`` may be one vector or a list of per-level vectors (selected
    jointly). Returns ``(c, selected)`` with ``selected`` shaped like the
    input. Candidate thresholds are the distinct values of ``1 - PPI`` so
    tied taxa enter or leave together; ``c`` is the smallest ``1 - PPI``
    left out (``inf`` when everything is selected).
    """
    if not 0 < target < 1:
        raise InvalidParameter("target FDR must lie in (0, 1)")
    nested = isinstance(ppis, (list, tuple)) and len(ppis) and np.ndim(ppis[0]) == 1
    flat = np.concatenate([np.asarray(p, float) for p in ppis]) if nested else np.asarray(ppis, float)
    if np.any((flat < 0) | (flat > 1)):
        raise InvalidParameter("PPIs must lie in [0, 1]")
    q = 1.0 - flat
    levels = np.unique(q)
    order = np.sort(q)
    csum = np.cumsum(order)
    best = 0
    for v in levels:
        k = np.searchsorted(order, v, side="right")
        if csum[k - 1] / k <= target + 1e-15:
            best = k
        else:
            break
    if best == 0:
        c = float(order[0]) if order.size else np.inf
        sel = np.zeros(flat.size, dtype=bool)
    else:
        c = float(order[best]) if best < order.size else np.inf
        sel = q < c
    if not nested:
        return c, sel
    out, pos = [], 0
    for p in ppis:
        out.append(sel[pos:pos + len(p)])
        pos += len(p)
    return c, out


def _interval(x, axis=0, level=0.95):
    lo = (1.0 - level) / 2.0
    qs = np.quantile(x, [lo, 0.5, 1.0 - lo], axis=axis, method="linear")
    return qs[1], qs[0], qs[2]


def fold_change_summary(traces, labels=None, pair=(1, 2), level=1):
    """Median and equal-tailed 95% interval of the log fold change.

    The fold change of taxon ``j`` between groups ``k`` and ``k'`` (1-based)
    is the difference of the group means of ``log alpha``. Draws of all
    chains are pooled. Returns ``(median, lower, upper)`` arrays.
    """
    traces = _traces(traces)
    k, k2 = pair
    K = traces[0].K
    if labels is not None:
        K = labels.K
    if not (1 <= k <= K and 1 <= k2 <= K and k != k2):
        raise InvalidParameter(f"invalid group pair {pair}")
    d = np.concatenate([t.group_means[level - 1][:, k2 - 1, :] - t.group_means[level - 1][:, k - 1, :]
                        for t in traces]).astype(float)
    return _interval(d)


def size_factor_summary(traces):
    """Posterior mean and equal-tailed 95% interval of each size factor."""
    traces = _traces(traces)
    if any(t.s is None for t in traces):
        raise NotApplicable("size factors were fixed by a plug-in estimator")
    s = np.concatenate([t.s for t in traces])
    _, lo, hi = _interval(s)
    return s.mean(axis=0), lo, hi


@dataclass
class PosteriorReport:
    """Per-taxon and per-sample results of one analysis."""

    taxa: list
    samples: list
    threshold: float
    target_fdr: float
    fdr: float
    config: dict = field(default_factory=dict)
    convergence: dict = field(default_factory=dict)

    @property
    def selected(self):
        return [(r["level"], r["taxon_id"]) for r in self.taxa if r["selected"]]


def build_report(traces, labels, target_fdr=0.05, config=None, convergence=None,
                 estimator="fraction") -> PosteriorReport:
    """Summaries of all chains; selection uses the PPIs from ``estimator``.

    When the traces carry Rao-Blackwellized PPIs both versions are
    reported (``ppi`` is always the one used for selection).
    """
    traces = _traces(traces)
    ppis = compute_ppi(traces, estimator)
    other = None
    if all(t.rb_ppi is not None for t in traces):
        other = compute_ppi(traces, "rao-blackwell" if estimator == "fraction" else "fraction")
    c, sel = fdr_select(ppis, target_fdr)
    K = traces[0].K
    pairs = list(combinations(range(1, K + 1), 2))
    taxa = []
    for l, (p, s) in enumerate(zip(ppis, sel)):
        fc = {pr: fold_change_summary(traces, labels, pr, l + 1) for pr in pairs}
        for j, tid in enumerate(traces[0].taxon_ids[l]):
            row = {"level": l + 1, "taxon_id": tid, "ppi": float(p[j]), "selected": bool(s[j])}
            if other is not None:
                row["ppi_rb" if estimator == "fraction" else "ppi_fraction"] = float(other[l][j])
            for (a, b), (med, lo, hi) in fc.items():
                key = f"lfc_{b}v{a}"
                row[f"{key}_median"] = float(med[j])
                row[f"{key}_lower"] = float(lo[j])
                row[f"{key}_upper"] = float(hi[j])
                row[f"{key}_direction"] = "up" if lo[j] > 0 else ("down" if hi[j] < 0 else "none")
            taxa.append(row)
    samples = []
    try:
        mean, lo, hi = size_factor_summary(traces)
        for i, sid in enumerate(traces[0].sample_ids):
            samples.append({"sample_id": sid, "s_mean": float(mean[i]),
                            "s_lower": float(lo[i]), "s_upper": float(hi[i])})
    except NotApplicable:
        fixed = traces[0].fixed_s
        if fixed is not None:
            for sid, v in zip(traces[0].sample_ids, fixed):
                samples.append({"sample_id": sid, "s_mean": float(v), "s_lower": float(v),
                                "s_upper": float(v)})
    flat_p = np.concatenate(ppis)
    flat_s = np.concatenate(sel)
    return PosteriorReport(taxa, samples, c, target_fdr, bayesian_fdr(flat_p, flat_s),
                           {**(config or {}), "ppi_estimator": estimator}, convergence or {})


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(rows, path, first):
    cols = list(first) + [k for k in (rows[0] if rows else {}) if k not in first]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def write_report(report: PosteriorReport, out_dir):
    """``taxa.tsv``, ``samples.tsv`` and ``summary.json`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(report.taxa, out / "taxa.tsv", TAXA_COLUMNS)
    _write_rows(report.samples, out / "samples.tsv", SAMPLE_COLUMNS)
    summary = {
        "target_fdr": report.target_fdr,
        "threshold": None if not np.isfinite(report.threshold) else report.threshold,
        "bayesian_fdr": report.fdr,
        "n_selected": len(report.selected),
        "selected": [{"level": l, "taxon_id": t} for l, t in report.selected],
        "config": report.config,
        "convergence": report.convergence,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


def _parse(v):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_report(out_dir) -> PosteriorReport:
    out = Path(out_dir)
    with open(out / "taxa.tsv") as fh:
        taxa = [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh, delimiter="\t")]
    for r in taxa:
        r["taxon_id"] = str(r["taxon_id"])
        r["selected"] = bool(r["selected"])
        r["ppi"] = float(r["ppi"])
    samples = []
    if (out / "samples.tsv").exists():
        with open(out / "samples.tsv") as fh:
            samples = [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh, delimiter="\t")]
        for r in samples:
            r["sample_id"] = str(r["sample_id"])
    summ = json.loads((out / "summary.json").read_text())
    thr = summ.get("threshold")
    return PosteriorReport(taxa, samples, np.inf if thr is None else thr, summ["target_fdr"],
                           summ["bayesian_fdr"], summ.get("config", {}), summ.get("convergence", {}))
