import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bayesda.data import make_table
from bayesda.errors import DegenerateQuantile, EmptySample, RleInadmissible, TmmDegenerate
from bayesda.normalization import (METHODS, estimate_css, estimate_q75, estimate_rle,
                                   estimate_size_factors, estimate_tmm, estimate_tss, tmm_reference)

ESTIMATORS = [estimate_tss, estimate_q75, estimate_rle, estimate_tmm, estimate_css]


def test_tss_examples():
    np.testing.assert_allclose(estimate_tss(np.array([[50, 50], [60, 40], [10, 90]])).s, 1.0)
    s = estimate_tss(np.array([[100, 0], [150, 50], [200, 200]])).s
    np.testing.assert_allclose(s, [0.5, 1.0, 2.0])
    with pytest.raises(EmptySample):
        estimate_tss(np.array([[0, 0], [1, 2]]))


def test_q75_examples():
    row = np.array([1, 4, 9, 16, 25])
    np.testing.assert_allclose(estimate_q75(np.vstack([row, row])).s, 1.0)
    s = estimate_q75(np.vstack([row, 3 * row])).s
    np.testing.assert_allclose(s, [1 / np.sqrt(3), np.sqrt(3)])
    with pytest.raises(DegenerateQuantile):
        estimate_q75(np.array([[0, 0, 0, 0, 0, 7], [1, 2, 3, 4, 5, 6]]))


def test_rle_examples():
    row = np.array([3, 5, 8, 13])
    np.testing.assert_allclose(estimate_rle(np.vstack([row, row])).s, 1.0)
    np.testing.assert_allclose(estimate_rle(np.vstack([row, 2 * row])).s, [1 / np.sqrt(2), np.sqrt(2)])
    with pytest.raises(RleInadmissible):
        estimate_rle(np.array([[0, 4, 2], [3, 0, 1], [2, 2, 0]]))


def test_rle_uses_only_all_positive_taxa():
    y = np.array([[3, 5, 0], [6, 10, 50]])
    np.testing.assert_allclose(estimate_rle(y).s, [1 / np.sqrt(2), np.sqrt(2)])


def test_tmm_examples():
    row = np.arange(1, 21)
    np.testing.assert_allclose(estimate_tmm(np.vstack([row, row])).s, 1.0)
    s = estimate_tmm(np.vstack([row, 2 * row])).s
    assert s[1] / s[0] == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(TmmDegenerate):
        estimate_tmm(np.array([[5, 0, 3, 0], [0, 4, 0, 9]]))


def test_tmm_reference_rule():
    y = np.array([[1, 2, 3, 4], [10, 20, 30, 40], [4, 5, 6, 7]])
    q = np.quantile(y, 0.75, axis=1)
    assert tmm_reference(y) == int(np.argmin(np.abs(q - q.mean())))


def test_tmm_robust_to_one_outlier_taxon():
    rng = np.random.default_rng(0)
    base = rng.integers(20, 200, size=40)
    y = np.vstack([base, 3 * base])
    y[1, 0] *= 50
    s = estimate_tmm(y).s
    assert s[1] / s[0] == pytest.approx(3.0, rel=0.02)


def test_css_follows_median_threshold():
    # threshold is the type-7 median 2.5, so only counts 1 and 2 enter
    y = np.array([[1, 2, 3, 100], [2, 4, 6, 200]])
    s = estimate_css(y).s
    assert s[1] / s[0] == pytest.approx(6 / 3)
    np.testing.assert_allclose(estimate_css(np.array([[1, 2, 3, 100]] * 3)).s, 1.0)
    with pytest.raises((DegenerateQuantile, EmptySample)):
        estimate_css(np.array([[0, 0, 0, 0], [1, 2, 3, 4]]))


def test_dispatch_and_table_input():
    t = make_table(np.array([[5, 6, 7], [10, 12, 14]]))
    for m in METHODS:
        sf = estimate_size_factors(t, m)
        assert sf.method == m.upper()
        assert sf.s[1] / sf.s[0] == pytest.approx(2.0)


positive_tables = arrays(np.int64, st.tuples(st.integers(2, 6), st.integers(4, 10)),
                         elements=st.integers(1, 500))


@given(positive_tables)
def test_product_is_one(y):
    for est in ESTIMATORS:
        assert abs(np.log(est(y).s).sum()) < 1e-10


@given(positive_tables, st.integers(2, 9))
def test_tss_scale_equivariance(y, c):
    s0 = estimate_tss(y).s
    y2 = y.copy()
    y2[0] *= c
    s1 = estimate_tss(y2).s
    assert s1[0] / s1[1] == pytest.approx(c * s0[0] / s0[1], rel=1e-10)
    if y.shape[0] > 2:
        assert s1[1] / s1[2] == pytest.approx(s0[1] / s0[2], rel=1e-10)


@given(positive_tables, st.randoms(use_true_random=False))
def test_permutation_equivariance(y, r):
    perm = list(range(y.shape[0]))
    r.shuffle(perm)
    for est in [estimate_tss, estimate_q75, estimate_rle, estimate_css]:
        np.testing.assert_allclose(est(y[perm]).s, est(y).s[perm], rtol=1e-10)
    # TMM: same reference sample after permutation
    ref = tmm_reference(y)
    np.testing.assert_allclose(estimate_tmm(y[perm], ref_sample=perm.index(ref)).s,
                               estimate_tmm(y, ref_sample=ref).s[perm], rtol=1e-10)
