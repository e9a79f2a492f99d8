"""Chain orchestration: sweeps, burn-in, seeding, traces and convergence checks."""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import _kernels
from . import samplers as S
from .data import CountTable, GroupLabels, TaxonomyTree, level_tables
from .errors import InvalidParameter, NonFiniteLikelihood
from .likelihoods import TopLevelHyper
from .normalization import estimate_size_factors

MODELS = ("ZINB", "DM")
NORMALIZATIONS = ("DPP", "TSS", "Q75", "RLE", "TMM", "CSS")
TRACE_MAGIC = b"BDATRACE"
TRACE_VERSION = 1
CONVERGENCE_THRESHOLD = 0.9


@dataclass
class RunConfig:
    """Settings of one analysis.

    ``burn_in=None`` discards the first half of the iterations and
    ``hyper=None`` / ``dpp=None`` fall back to the defaults for the data's
    number of groups and samples (``M = n // 2``).
    """

    model: str = "ZINB"
    normalization: str = "DPP"
    iterations: int = 20000
    burn_in: int | None = None
    chains: int = 4
    seed: int = 0
    thinning: int = 1
    hyper: TopLevelHyper | None = None
    selection: S.SelectionPrior = field(default_factory=S.SelectionPrior)
    scales: S.ProposalScales = field(default_factory=S.ProposalScales)
    bottom: S.BottomPriors = field(default_factory=S.BottomPriors)
    dpp: S.DppHyper | None = None
    use_tree: bool = True
    gamma_repeats: int = 20
    threads: int = 1

    def __post_init__(self):
        self.model = self.model.upper()
        self.normalization = self.normalization.upper()
        if self.model not in MODELS:
            raise InvalidParameter(f"model must be one of {MODELS}")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidParameter(f"normalization must be one of {NORMALIZATIONS}")
        if self.iterations < 1:
            raise InvalidParameter("iterations must be positive")
        if self.burn_in is None:
            self.burn_in = self.iterations // 2
        if not 0 <= self.burn_in < self.iterations:
            raise InvalidParameter("burn_in must lie in [0, iterations)")
        if self.chains < 1 or self.thinning < 1 or self.gamma_repeats < 1 or self.threads < 1:
            raise InvalidParameter("chains, thinning, gamma_repeats and threads must be >= 1")

    @property
    def recorded(self):
        return (self.iterations - self.burn_in) // self.thinning

    def summary(self):
        """Flat, JSON-friendly echo of the settings."""
        out = {
            "model": self.model,
            "normalization": self.normalization,
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "chains": self.chains,
            "seed": self.seed,
            "thinning": self.thinning,
            "use_tree": self.use_tree,
            "gamma_repeats": self.gamma_repeats,
            "selection": {k: v for k, v in asdict(self.selection).items() if k != "tree"},
            "scales": asdict(self.scales),
            "bottom": asdict(self.bottom),
        }
        if self.hyper is not None:
            out["hyper"] = asdict(self.hyper)
        if self.dpp is not None:
            out["dpp"] = asdict(self.dpp)
        return out


@dataclass
class Trace:
    """Post-burn-in draws of one chain.

    ``gamma[l]`` is ``(B, p_l)`` uint8, ``group_means[l]`` is ``(B, K, p_l)``
    holding the per-group mean of ``log alpha``, ``s`` is ``(B, n)`` (or
    ``None`` when size factors were fixed) and ``loglik`` is ``(B,)``.
    ``rb_ppi[l]`` is the average over recorded draws of the full
    conditional inclusion probabilities (a Rao-Blackwellized PPI).
    """

    gamma: list
    group_means: list
    s: np.ndarray | None
    loglik: np.ndarray
    iteration: np.ndarray
    thinning: int = 1
    seed: object = None
    model: str = "ZINB"
    normalization: str = "DPP"
    taxon_ids: list = field(default_factory=list)
    sample_ids: tuple = ()
    fixed_s: np.ndarray | None = None
    acceptance: dict = field(default_factory=dict)
    rb_ppi: list | None = None

    @property
    def draws(self):
        return self.loglik.size

    @property
    def L(self):
        return len(self.gamma)

    @property
    def K(self):
        return self.group_means[0].shape[1]

    def ppi(self, estimator="fraction"):
        if estimator == "fraction":
            return [g.mean(axis=0) for g in self.gamma]
        if estimator == "rao-blackwell":
            if self.rb_ppi is None:
                raise InvalidParameter("trace has no Rao-Blackwellized PPIs")
            return [np.asarray(r, dtype=float) for r in self.rb_ppi]
        raise InvalidParameter(f"unknown PPI estimator {estimator!r}")


# --------------------------------------------------------------------------
# running


def prepare_data(table: CountTable, labels: GroupLabels, tree: TaxonomyTree | None = None,
                 use_tree=True):
    """Per-level model data for a bottom-level table."""
    tables, sub = level_tables(table, tree if use_tree else None)
    return S.ModelData.from_tables(tables, labels, sub)


def _as_model_data(data, tree, config):
    if isinstance(data, S.ModelData):
        return data
    table, labels = data
    return prepare_data(table, labels, tree, config.use_tree)


def _state_dump(state, it):
    dump = {"iteration": it, "model": state.model}
    for name in ("s", "pi"):
        v = getattr(state, name, None)
        if v is not None:
            dump[name] = np.array(v, copy=True)
    dump["alpha"] = [a.copy() for a in state.alpha]
    dump["gamma"] = [g.copy() for g in state.gamma]
    if getattr(state, "phi", None) is not None:
        dump["phi"] = [f.copy() for f in state.phi]
    return dump


def sweep(state, data: S.ModelData, config: RunConfig, hyper: TopLevelHyper, rng, counts=None):
    """One full iteration over every kernel, in dependency order."""
    sc = config.scales
    if state.model == "ZINB":
        S.update_eta(state, data, rng)
        S.update_pi(state, data, rng, config.bottom)
        if not state.fixed_s:
            S.update_dpp(state, rng)
            S.update_s(state, data, rng, sc)
            S.update_scale(state, data, rng, hyper, sc)
        for lvl in range(1, data.L + 1):
            S.update_phi(state, data, lvl, rng, sc, config.bottom)
        acc = [S.update_alpha(state, data, lvl, rng, hyper, sc) for lvl in range(1, data.L + 1)]
        for lvl in range(1, data.L + 1):
            S.update_alpha_blocks(state, data, lvl, rng, hyper, sc)
    else:
        acc = [S.update_alpha(state, data, 1, rng, hyper, sc)]
        for lvl in range(2, data.L + 1):
            S.aggregate_alpha(state, data, lvl)
    flips = [S.update_gamma(state, data, lvl, rng, hyper, config.selection, config.gamma_repeats)
             for lvl in range(1, data.L + 1)]
    if counts is not None:
        counts["alpha"] += sum(acc)
        counts["gamma"] += sum(flips)
    return state


def _group_means(log_alpha, codes, K, n_k):
    onehot = np.zeros((K, log_alpha.shape[0]))
    onehot[codes, np.arange(log_alpha.shape[0])] = 1.0
    return (onehot @ log_alpha) / n_k[:, None]


def run_chain(data, tree=None, config: RunConfig | None = None, chain_seed=0) -> Trace:
    """Run one chain and return its post-burn-in trace.

    ``data`` is a :class:`~bayesda.samplers.ModelData` or a
    ``(CountTable, GroupLabels)`` pair. ``chain_seed`` is anything accepted
    by ``numpy.random.default_rng``; equal seeds give bit-identical traces.
    """
    config = config or RunConfig()
    data = _as_model_data(data, tree, config)
    rng = np.random.default_rng(chain_seed)
    hyper = config.hyper or TopLevelHyper.default(data.K)
    if hyper.K != data.K:
        raise InvalidParameter(f"hyperparameters are for {hyper.K} groups, data has {data.K}")
    if config.model == "DM" and config.normalization != "DPP":
        raise InvalidParameter("the Dirichlet-multinomial model takes no size factors")
    s_fixed = None
    if config.model == "ZINB" and config.normalization != "DPP":
        bottom = CountTable(data.y[0], data.sample_ids or [f"S{i + 1}" for i in range(data.n)],
                            data.taxon_ids[0])
        s_fixed = estimate_size_factors(bottom, config.normalization).s
    dpp_hyper = config.dpp or S.DppHyper.default(data.n)
    _kernels.warmup()
    state = S.initial_state(data, config.model, rng, s_fixed, dpp_hyper, config.bottom)

    B = config.recorded
    gam = [np.zeros((B, data.p(l + 1)), dtype=np.uint8) for l in range(data.L)]
    gm = [np.zeros((B, data.K, data.p(l + 1)), dtype=np.float32) for l in range(data.L)]
    track_s = config.model == "ZINB" and s_fixed is None
    s_tr = np.zeros((B, data.n)) if track_s else None
    ll = np.zeros(B)
    its = np.zeros(B, dtype=np.int64)
    rb = [np.zeros(data.p(l + 1)) for l in range(data.L)]
    counts = {"alpha": 0, "gamma": 0}
    b = 0
    for it in range(1, config.iterations + 1):
        sweep(state, data, config, hyper, rng, counts)
        cur = S.log_likelihood(state, data)
        if not np.isfinite(cur):
            raise NonFiniteLikelihood(f"log-likelihood is {cur} at iteration {it}",
                                      _state_dump(state, it))
        if it > config.burn_in and (it - config.burn_in) % config.thinning == 0 and b < B:
            for l in range(data.L):
                gam[l][b] = state.gamma[l]
                gm[l][b] = _group_means(state.log_alpha[l], data.codes, data.K, data.n_k)
            if track_s:
                s_tr[b] = state.s
            for l in range(data.L):
                rb[l] += S.inclusion_probabilities(state, data, l + 1, hyper, config.selection)
            ll[b] = cur
            its[b] = it
            b += 1
    entries = config.iterations * sum(data.n * data.p(l + 1) for l in range(data.L if config.model == "ZINB" else 1))
    acceptance = {
        "alpha": counts["alpha"] / entries,
        "gamma": counts["gamma"] / (config.iterations * config.gamma_repeats * data.L),
    }
    seed_repr = chain_seed.entropy if isinstance(chain_seed, np.random.SeedSequence) else chain_seed
    spawn_key = list(chain_seed.spawn_key) if isinstance(chain_seed, np.random.SeedSequence) else []
    return Trace(
        gam, gm, s_tr, ll, its, config.thinning,
        seed={"entropy": seed_repr, "spawn_key": spawn_key},
        model=config.model, normalization=config.normalization,
        taxon_ids=list(data.taxon_ids), sample_ids=tuple(data.sample_ids),
        fixed_s=None if s_fixed is None else np.asarray(s_fixed), acceptance=acceptance,
        rb_ppi=[r / max(b, 1) for r in rb],
    )


def chain_seeds(seed, chains):
    """Independent per-chain streams spawned from one master seed.

    Chain ``c`` always receives the ``c``-th child of ``SeedSequence(seed)``,
    so adding chains leaves the earlier ones untouched.
    """
    return np.random.SeedSequence(seed).spawn(chains)


@dataclass
class ConvergenceReport:
    """Pairwise Pearson correlations of per-chain PPIs (all levels stacked)."""

    correlations: dict
    threshold: float = CONVERGENCE_THRESHOLD
    applicable: bool = True

    @property
    def min_correlation(self):
        vals = list(self.correlations.values())
        return float(min(vals)) if vals else float("nan")

    @property
    def passed(self):
        if not self.applicable:
            return None
        return bool(self.min_correlation >= self.threshold)

    def as_dict(self):
        return {
            "applicable": self.applicable,
            "threshold": self.threshold,
            "passed": self.passed,
            "min_correlation": None if not self.applicable else self.min_correlation,
            "pairs": [{"chain_a": a, "chain_b": b, "correlation": r}
                      for (a, b), r in sorted(self.correlations.items())],
        }


def _pearson(u, v):
    if np.ptp(u) == 0 or np.ptp(v) == 0:
        return 1.0 if np.array_equal(u, v) else 0.0
    return float(np.corrcoef(u, v)[0, 1])


def convergence_report(traces, threshold=CONVERGENCE_THRESHOLD) -> ConvergenceReport:
    if len(traces) < 2:
        return ConvergenceReport({}, threshold, applicable=False)
    ppis = [np.concatenate(t.ppi()) for t in traces]
    corr = {(a, b): _pearson(ppis[a], ppis[b]) for a, b in combinations(range(len(traces)), 2)}
    return ConvergenceReport(corr, threshold)


def _run_one(args):
    data, config, seed = args
    return run_chain(data, None, config, seed)


def run_multi(data, tree=None, config: RunConfig | None = None):
    """Run ``config.chains`` independent chains; returns ``(traces, report)``.

    With ``config.threads > 1`` chains run in worker processes; the result
    does not depend on the number of workers.
    """
    config = config or RunConfig()
    data = _as_model_data(data, tree, config)
    seeds = chain_seeds(config.seed, config.chains)
    jobs = [(data, config, s) for s in seeds]
    if config.threads > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.threads, config.chains)) as ex:
            traces = list(ex.map(_run_one, jobs))
    else:
        traces = [_run_one(j) for j in jobs]
    return traces, convergence_report(traces)


# --------------------------------------------------------------------------
# trace files


def write_trace(trace: Trace, path):
    """Binary trace dump.

    Layout: the 8-byte magic ``BDATRACE``, a little-endian uint32 format
    version, a uint32 header length, a UTF-8 JSON header (dimensions, seed,
    model), then one record per draw: uint32 iteration, float64
    log-likelihood, ``n`` float64 size factors (if sampled), the bit-packed
    indicators of each level and the ``K x p_l`` float32 group means of
    each level. Per-chain summaries such as the Rao-Blackwellized PPIs sit
    in the header.
    """
    sizes = [g.shape[1] for g in trace.gamma]
    header = {
        "n": len(trace.sample_ids) if trace.sample_ids else (trace.s.shape[1] if trace.s is not None else 0),
        "K": trace.K,
        "p": sizes,
        "draws": trace.draws,
        "thinning": trace.thinning,
        "seed": trace.seed,
        "model": trace.model,
        "normalization": trace.normalization,
        "has_s": trace.s is not None,
        "taxon_ids": [list(t) for t in trace.taxon_ids],
        "sample_ids": list(trace.sample_ids),
        "acceptance": trace.acceptance,
        "rb_ppi": None if trace.rb_ppi is None else [np.asarray(r, float).tolist() for r in trace.rb_ppi],
    }
    if trace.s is not None:
        header["n"] = trace.s.shape[1]
    hb = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<II", TRACE_VERSION, len(hb)))
        fh.write(hb)
        for b in range(trace.draws):
            fh.write(struct.pack("<Id", int(trace.iteration[b]), float(trace.loglik[b])))
            if trace.s is not None:
                fh.write(trace.s[b].astype("<f8").tobytes())
            for g in trace.gamma:
                fh.write(np.packbits(g[b]).tobytes())
            for m in trace.group_means:
                fh.write(m[b].astype("<f4").tobytes())


def read_trace(path) -> Trace:
    raw = Path(path).read_bytes()
    if raw[:8] != TRACE_MAGIC:
        raise ValueError(f"{path} is not a trace file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != TRACE_VERSION:
        raise ValueError(f"unsupported trace version {version}")
    pos = 16
    h = json.loads(raw[pos:pos + hlen])
    pos += hlen
    B, K, n, sizes = h["draws"], h["K"], h["n"], h["p"]
    gam = [np.zeros((B, p), dtype=np.uint8) for p in sizes]
    gm = [np.zeros((B, K, p), dtype=np.float32) for p in sizes]
    s = np.zeros((B, n)) if h["has_s"] else None
    ll = np.zeros(B)
    its = np.zeros(B, dtype=np.int64)
    for b in range(B):
        its[b], ll[b] = struct.unpack_from("<Id", raw, pos)
        pos += 12
        if s is not None:
            s[b] = np.frombuffer(raw, "<f8", n, pos)
            pos += 8 * n
        for l, p in enumerate(sizes):
            nb = (p + 7) // 8
            gam[l][b] = np.unpackbits(np.frombuffer(raw, np.uint8, nb, pos))[:p]
            pos += nb
        for l, p in enumerate(sizes):
            gm[l][b] = np.frombuffer(raw, "<f4", K * p, pos).reshape(K, p)
            pos += 4 * K * p
    return Trace(gam, gm, s, ll, its, h["thinning"], h["seed"], h["model"], h["normalization"],
                 [tuple(t) for t in h["taxon_ids"]], tuple(h["sample_ids"]),
                 acceptance=h.get("acceptance", {}),
                 rb_ppi=None if h.get("rb_ppi") is None else [np.array(r) for r in h["rb_ppi"]])


def write_trace_summary(trace: Trace, path):
    """Tab-separated per-draw summary: log-likelihood, selections per level, size factors."""
    cols = ["iteration", "loglik"] + [f"selected_level{l + 1}" for l in range(trace.L)]
    if trace.s is not None:
        cols += [f"s_{sid}" for sid in trace.sample_ids] if trace.sample_ids else \
            [f"s_{i + 1}" for i in range(trace.s.shape[1])]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for b in range(trace.draws):
            row = [str(int(trace.iteration[b])), repr(float(trace.loglik[b]))]
            row += [str(int(g[b].sum())) for g in trace.gamma]
            if trace.s is not None:
                row += [repr(float(x)) for x in trace.s[b]]
            fh.write("\t".join(row) + "\n")
