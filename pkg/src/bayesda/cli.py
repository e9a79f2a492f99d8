"""Command-line interface.

Subcommands: ``qc``, ``normalize``, ``simulate``, ``fit``, ``benchmark`` and
``report``. Settings come from built-in defaults, then a flat ``key=value``
config file (``--config``), then explicit flags. Every run writes the
resolved settings to ``config.resolved.txt`` in its output directory.

Exit codes: 0 success, 1 error, 2 finished but the convergence check failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import shutil
import sys
from pathlib import Path

import numpy as np

from . import benchmark as B
from . import engine, inference, simgen
from .data import (load_count_table, load_group_labels, load_taxonomy, qc_features,
                   qc_samples, write_count_table, write_group_labels)
from .errors import BayesDAError, ConfigError
from .likelihoods import TopLevelHyper
from .normalization import METHODS as NORM_METHODS
from .normalization import estimate_size_factors
from .samplers import BottomPriors, DppHyper, ProposalScales, SelectionPrior

EXIT_OK, EXIT_ERROR, EXIT_CONVERGENCE = 0, 1, 2

# flat keys understood in config files, grouped by the object they feed
RUN_KEYS = ("model", "normalization", "iterations", "burn_in", "chains", "seed", "thinning",
            "use_tree", "gamma_repeats", "threads")
GEN_KEYS = ("scheme", "n", "p", "p_gamma", "K", "sigma", "null_prose", "base_counts")
SECTIONS = {
    "selection": SelectionPrior,
    "scales": ProposalScales,
    "bottom": BottomPriors,
    "dpp": DppHyper,
}
HYPER_KEYS = ("hyper.a", "hyper.b", "hyper.h")
CLI_KEYS = ("fdr", "min_nonzero", "orientation", "replicates", "methods", "overwrite",
            "ppi_estimator", "benchmark_score")


def _section_keys():
    keys = []
    for name, cls in SECTIONS.items():
        keys += [f"{name}.{f.name}" for f in dataclasses.fields(cls) if f.name != "tree"]
    return keys


ALL_KEYS = frozenset(RUN_KEYS + GEN_KEYS + HYPER_KEYS + CLI_KEYS + tuple(_section_keys()))


# --------------------------------------------------------------------------
# config parsing


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key=value, got {raw.strip()!r}")
        key, val = (x.strip() for x in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        out[key] = val
    return out


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(p.read_text(), str(p))


def _to_bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _none(v):
    return str(v).strip().lower() in ("none", "null", "")


def _convert(key, v, default):
    """Parse string ``v`` using the type of ``default`` as a guide."""
    if not isinstance(v, str):
        return v
    try:
        if _none(v) and (default is None or key in ("burn_in", "base_counts", "scales.tau_phi",
                                                     "scales.tau_shift", "scales.tau_block")):
            return None
        if isinstance(default, bool):
            return _to_bool(v)
        if isinstance(default, int) or key in ("burn_in", "dpp.M"):
            return int(v)
        if isinstance(default, float) or key in ("scales.tau_phi", "scales.tau_shift", "scales.tau_block"):
            return float(v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {v!r}") from None
    return v


def _defaults():
    d = {f.name: f.default for f in dataclasses.fields(engine.RunConfig)
         if f.default is not dataclasses.MISSING}
    d.update({f.name: f.default for f in dataclasses.fields(simgen.GeneratorConfig)})
    for name, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name != "tree":
                d[f"{name}.{f.name}"] = None if f.default is dataclasses.MISSING else f.default
    d.update({"fdr": 0.05, "min_nonzero": 3, "orientation": "samples-in-rows", "replicates": 10,
              "methods": ",".join(B.METHODS), "overwrite": False,
              "ppi_estimator": "fraction", "benchmark_score": "rao-blackwell"})
    return d


def resolve(file_cfg, flags):
    """Merge defaults < config file < flags into typed values."""
    defaults = _defaults()
    merged = dict(defaults)
    for src in (file_cfg, flags):
        for k, v in src.items():
            if v is None:
                continue
            merged[k] = _convert(k, v, defaults.get(k))
    for k in HYPER_KEYS:
        if k in file_cfg:
            merged[k] = tuple(float(x) for x in str(file_cfg[k]).split(","))
    return merged


def write_resolved(cfg, out_dir):
    lines = [f"{k} = {_fmt_value(cfg[k])}" for k in sorted(cfg)]
    (Path(out_dir) / "config.resolved.txt").write_text("\n".join(lines) + "\n")


def _fmt_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def _section(cfg, name, **extra):
    cls = SECTIONS[name]
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name == "tree":
            continue
        v = cfg.get(f"{name}.{f.name}")
        if v is not None or f.default is None:
            kw[f.name] = v
    kw.update(extra)
    return cls(**kw)


def build_run_config(cfg, K=None, n=None, tree=None) -> engine.RunConfig:
    hyper = None
    given = [cfg.get(k) for k in HYPER_KEYS]
    if any(g is not None for g in given):
        if K is None:
            raise ConfigError("hyper.* settings need the number of groups")
        base = TopLevelHyper.default(K)
        vals = []
        for g, d in zip(given, (base.a, base.b, base.h)):
            if g is None:
                vals.append(d)
            elif len(g) == 1:
                vals.append(g * (K + 1))
            else:
                vals.append(g)
        hyper = TopLevelHyper(*vals)
    sel_kind = cfg.get("selection.kind") or "beta-bernoulli"
    if sel_kind == "mrf" and (tree is None or not cfg["use_tree"]):
        raise ConfigError("the MRF selection prior needs a taxonomy tree (--tree)")
    selection = _section(cfg, "selection", tree=tree if sel_kind == "mrf" else None)
    dpp = None
    if cfg.get("dpp.M") is not None:
        dpp = _section(cfg, "dpp")
    elif n is not None and any(cfg.get(f"dpp.{f.name}") != f.default
                               for f in dataclasses.fields(DppHyper) if f.name != "M"):
        dpp = _section(cfg, "dpp", M=max(1, n // 2))
    return engine.RunConfig(
        model=cfg["model"], normalization=cfg["normalization"], iterations=cfg["iterations"],
        burn_in=cfg["burn_in"], chains=cfg["chains"], seed=cfg["seed"], thinning=cfg["thinning"],
        hyper=hyper, selection=selection, scales=_section(cfg, "scales"),
        bottom=_section(cfg, "bottom"), dpp=dpp, use_tree=cfg["use_tree"],
        gamma_repeats=cfg["gamma_repeats"], threads=cfg["threads"])


def build_generator_config(cfg) -> simgen.GeneratorConfig:
    return simgen.GeneratorConfig(**{k: cfg[k] for k in GEN_KEYS}, seed=cfg["seed"])


# --------------------------------------------------------------------------
# helpers


def prepare_out(path, overwrite):
    if path is None:
        raise ConfigError("--out is required")
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {out} is not empty; pass --overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inputs(args, cfg, need_labels=True):
    if not args.counts:
        raise ConfigError("--counts is required")
    table = load_count_table(args.counts, cfg["orientation"])
    labels = None
    if need_labels:
        if not args.labels:
            raise ConfigError("--labels is required")
        labels = load_group_labels(args.labels, table.sample_ids)
    return table, labels


def write_convergence(report: engine.ConvergenceReport, path):
    with open(path, "w") as fh:
        fh.write("chain_a\tchain_b\tcorrelation\tthreshold\tpassed\n")
        for (a, b), r in sorted(report.correlations.items()):
            fh.write(f"{a + 1}\t{b + 1}\t{r!r}\t{report.threshold!r}\t{int(r >= report.threshold)}\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_qc(args, cfg):
    table, labels = _inputs(args, cfg)
    out = prepare_out(args.out, cfg["overwrite"])
    table, rep1 = qc_samples(table, labels)
    labels = labels.align(table.sample_ids)
    table, rep2 = qc_features(table, labels, cfg["min_nonzero"])
    write_count_table(table, out / "counts.tsv")
    write_group_labels(labels, out / "labels.tsv")
    rep1.merge(rep2).write(out / "qc_report.tsv")
    write_resolved(cfg, out)
    print(f"retained {table.n} samples and {table.p} taxa; "
          f"removed {len(rep1.removed_samples)} samples and {len(rep2.removed_taxa)} taxa")
    return EXIT_OK


def cmd_normalize(args, cfg):
    table, _ = _inputs(args, cfg, need_labels=False)
    method = cfg["normalization"].lower()
    if method not in NORM_METHODS:
        raise ConfigError(f"--norm must be a plug-in method {NORM_METHODS}; "
                          "model-based size factors come from `fit`")
    out = prepare_out(args.out, cfg["overwrite"])
    sf = estimate_size_factors(table, method)
    with open(out / "size_factors.tsv", "w") as fh:
        fh.write("sample_id\ts\n")
        for sid, v in zip(table.sample_ids, sf.s):
            fh.write(f"{sid}\t{float(v)!r}\n")
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_simulate(args, cfg):
    gcfg = build_generator_config(cfg)
    out = prepare_out(args.out, cfg["overwrite"])
    ds = simgen.generate(gcfg)
    simgen.write_dataset(ds, out, gcfg)
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_fit(args, cfg):
    table, labels = _inputs(args, cfg)
    tree = load_taxonomy(args.tree) if args.tree else None
    run = build_run_config(cfg, labels.K, table.n, tree)
    out = prepare_out(args.out, cfg["overwrite"])
    write_resolved(cfg, out)
    traces, conv = engine.run_multi((table, labels), tree, run)
    tdir = out / "traces"
    tdir.mkdir()
    for c, tr in enumerate(traces, 1):
        engine.write_trace(tr, tdir / f"chain{c}.bin")
        engine.write_trace_summary(tr, tdir / f"chain{c}.tsv")
    report = inference.build_report(traces, labels, cfg["fdr"], run.summary(), conv.as_dict(),
                                    cfg["ppi_estimator"])
    inference.write_report(report, out)
    write_convergence(conv, out / "convergence.tsv")
    print(f"selected {len(report.selected)} taxa at Bayesian FDR {report.fdr:.4g} "
          f"(target {cfg['fdr']})")
    if conv.passed is False:
        print(f"warning: minimum pairwise PPI correlation {conv.min_correlation:.3f} "
              f"is below {conv.threshold}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_benchmark(args, cfg):
    out = prepare_out(args.out, cfg["overwrite"])
    methods = [m for m in str(cfg["methods"]).split(",") if m.strip()]
    run = build_run_config({**cfg, "chains": cfg["chains"] if "chains" in args.explicit else 1})
    if args.data:
        cells = {}
        for d in args.data:
            d = Path(d)
            table = load_count_table(d / "counts.tsv")
            labels = load_group_labels(d / "labels.tsv", table.sample_ids)
            truth_map = simgen.read_truth(d / "truth.tsv")
            truth = np.array([truth_map[t] for t in table.taxon_ids])
            ds = simgen.LabeledDataset(table, labels, truth)
            for meth, (a, m) in B.evaluate(ds, methods, run, cfg["seed"],
                                           cfg["benchmark_score"]).items():
                c = cells.setdefault((0, meth), B.Cell())
                c.auc.append(a)
                c.mcc.append(m)
        rows = B.benchmark_rows([_data_setting(table, labels, truth)], cells)
    else:
        schemes = [s.strip() for s in str(cfg["scheme"]).split(",")]
        settings = [build_generator_config({**cfg, "scheme": s}) for s in schemes]
        cells = B.run_benchmark(settings, methods, cfg["replicates"], run, cfg["threads"],
                                cfg["benchmark_score"])
        rows = B.benchmark_rows(settings, cells)
    B.write_benchmark(rows, out / "benchmark.tsv")
    write_resolved(cfg, out)
    for r in rows:
        print(f"{r['method']:>9}  AUC {r['auc_mean']:.3f} ({r['auc_se']:.3f})  "
              f"MCC {r['mcc_mean']:.3f} ({r['mcc_se']:.3f})")
    return EXIT_OK


def _data_setting(table, labels, truth):
    class _Setting:
        scheme = "data"
        n, p, p_gamma, K, sigma = table.n, table.p, int(truth.sum()), labels.K, float("nan")
    return _Setting


def cmd_report(args, cfg):
    """Re-read a fit directory, optionally re-select at another FDR target."""
    if not args.input:
        raise ConfigError("report needs --input pointing to a fit output directory")
    src = Path(args.input)
    rep = inference.read_report(src)
    if "fdr" in args.explicit:
        rep = _reselect(rep, cfg["fdr"])
    if args.out:
        out = prepare_out(args.out, cfg["overwrite"])
        inference.write_report(rep, out)
        write_resolved(cfg, out)
    print(f"target FDR {rep.target_fdr}; selected {len(rep.selected)} taxa; "
          f"Bayesian FDR {rep.fdr:.4g}")
    for lvl, tid in rep.selected:
        ppi = next(r["ppi"] for r in rep.taxa if r["level"] == lvl and r["taxon_id"] == tid)
        print(f"  level {lvl}\t{tid}\tPPI {ppi:.3f}")
    return EXIT_OK


def _reselect(rep, target):
    levels = sorted({r["level"] for r in rep.taxa})
    ppis = [np.array([r["ppi"] for r in rep.taxa if r["level"] == lvl]) for lvl in levels]
    c, sel = inference.fdr_select(ppis, target)
    flat = np.concatenate(sel)
    taxa = [{**r, "selected": bool(s)} for r, s in zip(
        sorted(rep.taxa, key=lambda r: levels.index(r["level"])), flat)]
    return inference.PosteriorReport(taxa, rep.samples, c, target,
                                     inference.bayesian_fdr(np.concatenate(ppis), flat),
                                     rep.config, rep.convergence)


HELP = {
    "qc": "remove outlier samples and low-prevalence taxa",
    "normalize": "plug-in size factors (tss, q75, rle, tmm, css)",
    "simulate": "write one simulated dataset with its truth",
    "fit": "run the MCMC sampler and write PPIs, selection and summaries",
    "benchmark": "AUC/MCC of the models and frequentist baselines",
    "report": "re-read a fit directory, optionally re-selecting at another --fdr",
}
COMMANDS = {"qc": cmd_qc, "normalize": cmd_normalize, "simulate": cmd_simulate, "fit": cmd_fit,
            "benchmark": cmd_benchmark, "report": cmd_report}


def build_parser():
    ap = argparse.ArgumentParser(prog="bayesda", description="Bayesian differential abundance analysis")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--counts")
        p.add_argument("--labels")
        p.add_argument("--tree")
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--model", choices=("dm", "zinb"), type=str.lower)
        p.add_argument("--norm", choices=("dpp",) + NORM_METHODS, type=str.lower)
        p.add_argument("--fdr", type=float)
        p.add_argument("--chains", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--overwrite", action="store_true", default=None)
        if name == "benchmark":
            p.add_argument("--data", nargs="+", help="dataset directories written by `simulate`")
        if name == "report":
            p.add_argument("--input", help="output directory of a previous `fit`")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    flags = {"seed": args.seed, "threads": args.threads, "model": args.model,
             "normalization": args.norm, "fdr": args.fdr, "chains": args.chains,
             "iterations": args.iters, "overwrite": args.overwrite}
    try:
        file_cfg = load_config(args.config)
        args.explicit = {k for k, v in flags.items() if v is not None} | set(file_cfg)
        cfg = resolve(file_cfg, flags)
        if "iterations" in args.explicit and "burn_in" not in file_cfg:
            cfg["burn_in"] = None
        return COMMANDS[args.command](args, cfg)
    except (BayesDAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
