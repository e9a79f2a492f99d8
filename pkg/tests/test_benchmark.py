import math

import numpy as np
import pytest

from bayesda import benchmark as B
from bayesda import engine as E
from bayesda import simgen as G
from bayesda.errors import InvalidParameter


def test_canonical_method_names():
    assert B.canonical_method("kruskal") == "KW"
    assert B.canonical_method("zinb_tss") == "ZINB-TSS"
    assert B.canonical_method("zinb") == "ZINB-DPP"
    with pytest.raises(InvalidParameter):
        B.canonical_method("edgeR")


def test_top_m():
    np.testing.assert_array_equal(B.top_m([0.1, 0.9, 0.5, 0.9], 2), [False, True, False, True])
    assert not B.top_m([1, 2], 0).any()


def test_cell_summary():
    c = B.Cell(auc=[0.9, 1.0, math.nan], mcc=[0.5, 0.7, math.nan])
    s = c.summary()
    assert s["auc_mean"] == pytest.approx(0.95)
    assert s["auc_se"] == pytest.approx(np.std([0.9, 1.0], ddof=1) / np.sqrt(2))
    assert s["replicates"] == 3 and s["failed"] == 1
    assert math.isnan(B.Cell(auc=[math.nan], mcc=[math.nan]).summary()["auc_mean"])


def test_evaluate_records_failures_as_missing():
    ds = G.generate(G.GeneratorConfig("ZINB", n=12, p=30, p_gamma=4, sigma=3, seed=0))
    out = B.evaluate(ds, ["ZINB-RLE", "ANOVA"])
    assert all(math.isnan(v) for v in out["ZINB-RLE"])
    assert out["ANOVA"][0] > 0.5


def test_run_benchmark_grid_and_thread_invariance(tmp_path):
    settings = [G.GeneratorConfig("DM", n=12, p=30, p_gamma=4, sigma=2, seed=1),
                G.GeneratorConfig("synthetic", n=12, p=30, p_gamma=4, sigma=2, seed=1)]
    a = B.run_benchmark(settings, ["ANOVA", "KW"], replicates=2)
    b = B.run_benchmark(settings, ["ANOVA", "KW"], replicates=2, threads=2)
    assert set(a) == {(0, "ANOVA"), (0, "KW"), (1, "ANOVA"), (1, "KW")}
    for k in a:
        assert a[k].auc == b[k].auc and a[k].mcc == b[k].mcc
    rows = B.benchmark_rows(settings, a)
    B.write_benchmark(rows, tmp_path / "b.tsv")
    back = B.read_benchmark(tmp_path / "b.tsv")
    assert back == rows
    with pytest.raises(InvalidParameter):
        B.run_benchmark(settings, ["ANOVA"], replicates=0)


def test_bayesian_scores_use_requested_estimator():
    ds = G.generate(G.GeneratorConfig("ZINB", n=12, p=20, p_gamma=4, sigma=3, seed=2))
    run = E.RunConfig(iterations=100, chains=1)
    frac = B.method_scores(ds, "ZINB-DPP", run, estimator="fraction")
    rb = B.method_scores(ds, "ZINB-DPP", run, estimator="rao-blackwell")
    assert frac.shape == rb.shape == (20,)
    assert np.all((rb >= 0) & (rb <= 1))
    # fraction PPIs live on the grid of recorded draws
    np.testing.assert_allclose(frac * 50, np.round(frac * 50))
