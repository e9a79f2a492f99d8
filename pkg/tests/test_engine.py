import numpy as np
import pytest

from bayesda import engine as E
from bayesda import samplers as S
from bayesda.errors import InvalidParameter, NonFiniteLikelihood
from bayesda.likelihoods import TopLevelHyper
from bayesda.simgen import GeneratorConfig, generate


@pytest.fixture(scope="module")
def small():
    return generate(GeneratorConfig("ZINB", n=8, p=15, p_gamma=3, sigma=2.0, seed=3))


def _cfg(**kw):
    base = dict(iterations=60, burn_in=30, chains=1, seed=11)
    base.update(kw)
    return E.RunConfig(**base)


def test_run_config_defaults_and_validation():
    cfg = E.RunConfig()
    assert (cfg.iterations, cfg.burn_in, cfg.chains, cfg.thinning) == (20000, 10000, 4, 1)
    assert E.RunConfig(iterations=10, burn_in=5).recorded == 5
    with pytest.raises(InvalidParameter):
        E.RunConfig(iterations=10, burn_in=10)
    with pytest.raises(InvalidParameter):
        E.RunConfig(chains=0)
    with pytest.raises(InvalidParameter):
        E.RunConfig(model="ZIP")


@pytest.mark.parametrize("model", ["ZINB", "DM"])
def test_same_seed_bit_identical(small, model):
    data = (small.table, small.labels)
    a = E.run_chain(data, None, _cfg(model=model), 5)
    b = E.run_chain(data, None, _cfg(model=model), 5)
    for ga, gb in zip(a.gamma, b.gamma):
        np.testing.assert_array_equal(ga, gb)
    np.testing.assert_array_equal(a.loglik, b.loglik)
    if model == "ZINB":
        np.testing.assert_array_equal(a.s, b.s)


def test_recorded_count_and_finite_loglik(small):
    tr = E.run_chain((small.table, small.labels), None, _cfg(iterations=10, burn_in=5), 0)
    assert tr.draws == 5
    np.testing.assert_array_equal(tr.iteration, [6, 7, 8, 9, 10])
    assert np.all(np.isfinite(tr.loglik))
    thin = E.run_chain((small.table, small.labels), None, _cfg(iterations=20, burn_in=4, thinning=4), 0)
    assert thin.draws == 4


@pytest.mark.parametrize("model", ["ZINB", "DM"])
def test_prior_only_chain_ppi(model):
    # one group: both branches of the selection marginal coincide, so the
    # indicator follows its prior
    y = np.full((4, 1), 5)
    data = S.ModelData(y=[y], codes=np.zeros(4, dtype=int), K=1)
    cfg = E.RunConfig(model=model, iterations=3000, burn_in=500, chains=1,
                      selection=S.SelectionPrior("bernoulli", omega=0.1),
                      hyper=TopLevelHyper.default(1), dpp=S.DppHyper(M=2))
    tr = E.run_chain(data, None, cfg, 1)
    assert tr.ppi()[0][0] == pytest.approx(0.1, abs=0.02)
    assert tr.ppi("rao-blackwell")[0][0] == pytest.approx(0.1, abs=1e-12)


def test_chain_seeds_prefix_stable():
    a = E.chain_seeds(42, 2)
    b = E.chain_seeds(42, 4)
    for x, y in zip(a, b):
        assert np.random.default_rng(x).random() == np.random.default_rng(y).random()


def test_multi_chain_report_and_thread_invariance(small):
    data = (small.table, small.labels)
    t1, r1 = E.run_multi(data, None, _cfg(chains=2))
    t2, r2 = E.run_multi(data, None, _cfg(chains=2, threads=2))
    for a, b in zip(t1, t2):
        for ga, gb in zip(a.gamma, b.gamma):
            np.testing.assert_array_equal(ga, gb)
    assert set(r1.correlations) == {(0, 1)}
    assert r1.as_dict() == r2.as_dict()


def test_convergence_report_edge_cases(small):
    tr = E.run_chain((small.table, small.labels), None, _cfg(), 0)
    rep = E.convergence_report([tr, tr])
    assert rep.min_correlation == pytest.approx(1.0)
    assert rep.passed
    single = E.convergence_report([tr])
    assert not single.applicable and single.passed is None


def test_trace_roundtrip(tmp_path, small):
    tr = E.run_chain((small.table, small.labels), None, _cfg(), 0)
    E.write_trace(tr, tmp_path / "c.bin")
    back = E.read_trace(tmp_path / "c.bin")
    for a, b in zip(tr.gamma, back.gamma):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(tr.group_means, back.group_means):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(tr.s, back.s)
    np.testing.assert_array_equal(tr.loglik, back.loglik)
    np.testing.assert_array_equal(tr.iteration, back.iteration)
    np.testing.assert_allclose(back.rb_ppi[0], tr.rb_ppi[0])
    assert back.taxon_ids == tr.taxon_ids and back.sample_ids == tr.sample_ids
    E.write_trace_summary(tr, tmp_path / "c.tsv")
    lines = (tmp_path / "c.tsv").read_text().splitlines()
    assert len(lines) == tr.draws + 1
    assert lines[0].split("\t")[:3] == ["iteration", "loglik", "selected_level1"]


def test_plugin_normalization_fixes_s(small):
    tr = E.run_chain((small.table, small.labels), None, _cfg(normalization="TSS"), 0)
    assert tr.s is None
    tot = small.table.counts.sum(axis=1)
    np.testing.assert_allclose(tr.fixed_s, tot / np.exp(np.log(tot).mean()))
    with pytest.raises(InvalidParameter):
        E.run_chain((small.table, small.labels), None, _cfg(model="DM", normalization="TSS"), 0)


def test_nonfinite_likelihood_aborts_with_dump(small, monkeypatch):
    monkeypatch.setattr(S, "log_likelihood", lambda state, data: float("nan"))
    with pytest.raises(NonFiniteLikelihood) as err:
        E.run_chain((small.table, small.labels), None, _cfg(), 0)
    assert err.value.dump["iteration"] == 1
