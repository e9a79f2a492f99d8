"""Plug-in size-factor estimators.

Every estimator returns factors rescaled so that their geometric mean is
one, i.e. ``sum(log s) == 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import as_counts, quantile
from .errors import DegenerateQuantile, EmptySample, RleInadmissible, TmmDegenerate

METHODS = ("tss", "q75", "rle", "tmm", "css")


@dataclass(frozen=True)
class SizeFactors:
    s: np.ndarray
    method: str
    constraint: str = "geometric-mean-one"

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("size factors must be finite and positive")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)


def _geometric_normalize(raw, method):
    log_s = np.log(raw)
    log_s = log_s - log_s.mean()
    return SizeFactors(np.exp(log_s), method)


def estimate_tss(table) -> SizeFactors:
    """Total sum scaling: ``s_i`` proportional to the library size."""
    totals = as_counts(table).sum(axis=1).astype(float)
    if np.any(totals <= 0):
        raise EmptySample(f"samples {np.flatnonzero(totals <= 0).tolist()} have no reads")
    return _geometric_normalize(totals, "TSS")


def estimate_q75(table) -> SizeFactors:
    """Upper-quartile scaling on the within-sample 75th percentile count."""
    y = as_counts(table).astype(float)
    q = quantile(y, 0.75) if y.ndim == 1 else np.quantile(y, 0.75, axis=1, method="linear")
    if np.any(q <= 0):
        raise DegenerateQuantile(f"samples {np.flatnonzero(q <= 0).tolist()} have a zero upper quartile")
    return _geometric_normalize(q, "Q75")


def estimate_rle(table) -> SizeFactors:
    """Median ratio of counts to per-taxon geometric means.

    Only taxa observed in every sample enter the geometric means; when none
    exist the estimator is undefined, which is the usual failure on sparse
    microbiome tables.
    """
    y = as_counts(table).astype(float)
    positive = np.all(y > 0, axis=0)
    if not positive.any():
        raise RleInadmissible("no taxon is positive in every sample")
    logy = np.log(y[:, positive])
    log_ratio = logy - logy.mean(axis=0)
    return _geometric_normalize(np.exp(np.median(log_ratio, axis=1)), "RLE")


def tmm_reference(y) -> int:
    """Sample whose upper-quartile count is closest to the mean upper quartile."""
    q = np.quantile(np.asarray(y, dtype=float), 0.75, axis=1, method="linear")
    return int(np.argmin(np.abs(q - q.mean())))


def _tmm_log_factor(obs, ref, trim_m=0.3, trim_a=0.05):
    n_o, n_r = obs.sum(), ref.sum()
    both = (obs > 0) & (ref > 0)
    if not both.any():
        raise TmmDegenerate("sample pair shares no positive taxa")
    o, r = obs[both], ref[both]
    po, pr = o / n_o, r / n_r
    m = np.log(po) - np.log(pr)
    a = 0.5 * (np.log(po) + np.log(pr))
    var = (n_o - o) / (n_o * o) + (n_r - r) / (n_r * r)
    k = m.size
    lo_m = np.floor(k * trim_m) + 1
    hi_m = k + 1 - lo_m
    lo_a = np.floor(k * trim_a) + 1
    hi_a = k + 1 - lo_a
    rm = rankdata(m)
    ra = rankdata(a)
    keep = (rm >= lo_m) & (rm <= hi_m) & (ra >= lo_a) & (ra <= hi_a)
    # taxa present at the full depth of a sample have zero variance
    keep &= var > 0
    if not keep.any():
        raise TmmDegenerate("trimming removed every taxon for a sample pair")
    w = 1.0 / var[keep]
    return float(np.sum(w * m[keep]) / np.sum(w))


def estimate_tmm(table, ref_sample: int | None = None, trim_m=0.3, trim_a=0.05) -> SizeFactors:
    """Weighted trimmed mean of M-values against a reference sample.

    M-values are log ratios of library-scaled counts; the upper and lower
    ``trim_m`` fraction of M and ``trim_a`` fraction of A-values are
    trimmed before an inverse-variance weighted mean. The factor is the
    library size times the exponentiated mean, normalized once at the end.
    """
    y = as_counts(table).astype(float)
    totals = y.sum(axis=1)
    if np.any(totals <= 0):
        raise EmptySample(f"samples {np.flatnonzero(totals <= 0).tolist()} have no reads")
    r = tmm_reference(y) if ref_sample is None else int(ref_sample)
    if not 0 <= r < y.shape[0]:
        raise IndexError(f"reference sample {r} out of range")
    log_f = np.zeros(y.shape[0])
    for i in range(y.shape[0]):
        if i != r:
            log_f[i] = _tmm_log_factor(y[i], y[r], trim_m, trim_a)
    return _geometric_normalize(totals * np.exp(log_f), "TMM")


def estimate_css(table) -> SizeFactors:
    """Sum of the counts at or below the within-sample median count."""
    y = as_counts(table).astype(float)
    med = np.quantile(y, 0.5, axis=1, method="linear")
    css = np.where(y <= med[:, None], y, 0.0).sum(axis=1)
    if np.any(css <= 0):
        raise DegenerateQuantile(f"samples {np.flatnonzero(css <= 0).tolist()} have a zero cumulative sum")
    return _geometric_normalize(css, "CSS")


_ESTIMATORS = {
    "tss": estimate_tss,
    "q75": estimate_q75,
    "rle": estimate_rle,
    "tmm": estimate_tmm,
    "css": estimate_css,
}


def estimate_size_factors(table, method: str) -> SizeFactors:
    try:
        fn = _ESTIMATORS[method.lower()]
    except KeyError:
        raise ValueError(f"unknown normalization {method!r}; choose from {METHODS}") from None
    return fn(table)
