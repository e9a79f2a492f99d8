import json

import numpy as np
import pytest

from bayesda import cli, inference
from bayesda.errors import ConfigError


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- config


def test_config_parsing_rules():
    cfg = cli.parse_config_text("iterations = 50  # short\n\n# full-line comment\nhyper.h=10,20,30\n")
    assert cfg == {"iterations": "50", "hyper.h": "10,20,30"}
    with pytest.raises(ConfigError, match="unknown key"):
        cli.parse_config_text("iteratoins = 5")
    with pytest.raises(ConfigError, match="duplicate"):
        cli.parse_config_text("seed=1\nseed=2")
    with pytest.raises(ConfigError, match="key=value"):
        cli.parse_config_text("seed 1")


def test_resolve_precedence_and_types():
    cfg = cli.resolve({"iterations": "50", "seed": "3", "selection.kind": "bernoulli",
                       "scales.tau_phi": "none", "hyper.h": "10,20,30"}, {"seed": 9})
    assert cfg["iterations"] == 50 and cfg["seed"] == 9
    assert cfg["scales.tau_phi"] is None
    assert cfg["hyper.h"] == (10.0, 20.0, 30.0)
    run = cli.build_run_config({**cfg, "hyper.a": (2, 2, 2), "hyper.b": (1, 1, 1)}, K=2, n=12)
    assert run.hyper.h == (10.0, 20.0, 30.0)
    assert run.selection.kind == "bernoulli"


def test_mrf_without_tree_is_an_error(tmp_path, toy_paths, capsys):
    c = _cfg(tmp_path, "selection.kind = mrf\niterations = 20\nchains = 1\n")
    code = _run("fit", "--counts", toy_paths["counts"], "--labels", toy_paths["labels"],
                "--config", c, "--out", tmp_path / "o")
    assert code == 1
    assert "tree" in capsys.readouterr().err


def test_missing_inputs_exit_one(tmp_path, capsys):
    assert _run("fit", "--out", tmp_path / "o") == 1
    assert _run("fit", "--counts", tmp_path / "nope.tsv", "--labels", tmp_path / "x",
                "--out", tmp_path / "o") == 1


# ---------------------------------------------------------------- fit and report


@pytest.fixture(scope="module")
def toy_fit(tmp_path_factory, toy_paths):
    root = tmp_path_factory.mktemp("fit")
    outs = []
    for name in ("a", "b"):
        code = _run("fit", "--counts", toy_paths["counts"], "--labels", toy_paths["labels"],
                    "--tree", toy_paths["taxonomy"], "--seed", 7, "--iters", 400, "--chains", 2,
                    "--fdr", 0.01, "--out", root / name)
        outs.append((code, root / name))
    return outs


def test_fit_outputs_and_determinism(toy_fit):
    (ca, a), (cb, b) = toy_fit
    assert ca in (0, 2) and ca == cb
    for f in ("taxa.tsv", "samples.tsv", "summary.json", "convergence.tsv", "config.resolved.txt",
              "traces/chain1.bin", "traces/chain2.tsv"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    conv = json.loads((a / "summary.json").read_text())["convergence"]
    assert (ca == 2) == (conv["passed"] is False)


def test_fit_realized_fdr_below_target(toy_fit):
    _, a = toy_fit[0]
    rep = inference.read_report(a)
    ppis = np.array([r["ppi"] for r in rep.taxa])
    sel = np.array([r["selected"] for r in rep.taxa])
    assert inference.bayesian_fdr(ppis, sel) <= 0.01
    assert rep.target_fdr == 0.01
    # the tree contributes the genus and family levels
    assert {r["level"] for r in rep.taxa} == {1, 2, 3}


def test_fit_refuses_non_empty_output(toy_fit, toy_paths):
    _, a = toy_fit[0]
    assert _run("fit", "--counts", toy_paths["counts"], "--labels", toy_paths["labels"],
                "--iters", 10, "--chains", 1, "--out", a) == 1


def test_report_reselect(toy_fit, tmp_path, capsys):
    _, a = toy_fit[0]
    assert _run("report", "--input", a, "--fdr", 0.2, "--out", tmp_path / "r") == 0
    rep = inference.read_report(tmp_path / "r")
    assert rep.target_fdr == 0.2 and rep.fdr <= 0.2
    orig = inference.read_report(a)
    assert set(orig.selected) <= set(rep.selected)


def test_report_roundtrip_lossless(toy_fit, tmp_path):
    _, a = toy_fit[0]
    assert _run("report", "--input", a, "--out", tmp_path / "r") == 0
    for f in ("taxa.tsv", "samples.tsv"):
        assert (tmp_path / "r" / f).read_text() == (a / f).read_text()


# ---------------------------------------------------------------- other subcommands


def test_qc_and_normalize(tmp_path, toy_paths):
    assert _run("qc", "--counts", toy_paths["counts"], "--labels", toy_paths["labels"],
                "--out", tmp_path / "qc") == 0
    assert (tmp_path / "qc" / "qc_report.tsv").exists()
    assert _run("normalize", "--counts", tmp_path / "qc" / "counts.tsv", "--norm", "tss",
                "--out", tmp_path / "n") == 0
    rows = (tmp_path / "n" / "size_factors.tsv").read_text().splitlines()
    s = np.array([float(r.split("\t")[1]) for r in rows[1:]])
    assert abs(np.log(s).sum()) < 1e-10
    assert _run("normalize", "--counts", toy_paths["counts"], "--norm", "dpp",
                "--out", tmp_path / "n2") == 1


def test_simulate_then_benchmark_on_data(tmp_path, capsys):
    c = _cfg(tmp_path, "scheme = DM\nn = 24\np = 30\np_gamma = 4\nsigma = 5\n"
             "methods = ANOVA,KW,ZINB-DPP,DM\niterations = 200\n")
    assert _run("simulate", "--config", c, "--seed", 3, "--out", tmp_path / "d") == 0
    for f in ("counts.tsv", "labels.tsv", "truth.tsv", "truth.json", "config.resolved.txt"):
        assert (tmp_path / "d" / f).exists()
    assert _run("benchmark", "--config", c, "--data", tmp_path / "d", "--out", tmp_path / "b") == 0
    from bayesda.benchmark import read_benchmark
    rows = {r["method"]: r for r in read_benchmark(tmp_path / "b" / "benchmark.tsv")}
    for m in ("ANOVA", "KW", "ZINB-DPP", "DM"):
        assert rows[m]["auc_mean"] >= 0.99
        assert rows[m]["replicates"] == 1


def test_rle_on_zero_inflated_data_is_na(tmp_path):
    c = _cfg(tmp_path, "scheme = ZINB\nn = 12\np = 30\np_gamma = 4\nsigma = 2\n"
             "methods = ZINB-RLE,ANOVA\nreplicates = 1\n")
    assert _run("benchmark", "--config", c, "--out", tmp_path / "b") == 0
    text = (tmp_path / "b" / "benchmark.tsv").read_text().splitlines()
    rle = next(line.split("\t") for line in text if "\tZINB-RLE\t" in line)
    assert rle[7] == "NA" and rle[-1] == "1"


def test_generated_benchmark_grid(tmp_path):
    c = _cfg(tmp_path, "scheme = DM\nn = 12\np = 30\np_gamma = 4\nsigma = 5\nreplicates = 2\n"
             "methods = ANOVA,KW\n")
    assert _run("benchmark", "--config", c, "--out", tmp_path / "b") == 0
    text = (tmp_path / "b" / "benchmark.tsv").read_text()
    again = tmp_path / "b2"
    assert _run("benchmark", "--config", c, "--out", again) == 0
    assert (again / "benchmark.tsv").read_text() == text
    from bayesda.benchmark import read_benchmark
    rows = read_benchmark(tmp_path / "b" / "benchmark.tsv")
    assert all(r["replicates"] == 2 and r["auc_mean"] > 0.95 for r in rows)
