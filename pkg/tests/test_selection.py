import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from alpha_het.data_model import BatchPanel, Dataset
from alpha_het.errors import NumericalError, ValidationError
from alpha_het.selection import (
    SelectionConfig,
    assign_regimes,
    bh_fdr,
    estimate_k,
    estimate_k_ratio,
    spec_statistic,
    spec_test,
)
from alpha_het.sieve import BasisSpec, build_projection, projection_from_covariates
from alpha_het.synthetic import LOADING_STRENGTHS, SyntheticSpec, generate, loading_models
from oracles import bh_bruteforce


def test_ratio_example():
    assert estimate_k_ratio([100, 50, 1, 0.9, 0.8], 4) == 2


def test_ratio_two_values():
    assert estimate_k_ratio([10, 1], 1) == 1


def test_ratio_ties_go_to_smaller_k():
    assert estimate_k_ratio([8, 4, 2, 1], 3) == 1


def test_ratio_floor_handles_exact_rank():
    assert estimate_k_ratio([5.0, 3.0, 0.0, 0.0], 3) == 2


def test_ratio_errors():
    with pytest.raises(ValidationError):
        estimate_k_ratio([3, 2], 2)
    with pytest.raises(ValidationError):
        estimate_k_ratio([3, 2], 0)
    with pytest.raises(NumericalError):
        estimate_k_ratio([0.0, 0.0], 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=8), st.floats(1e-4, 1e4))
def test_ratio_scale_invariance(vals, c):
    vals = sorted(vals, reverse=True)
    K_max = len(vals) - 1
    assert estimate_k_ratio(vals, K_max) == estimate_k_ratio([c * v for v in vals], K_max)


def test_estimate_k_noiseless_rank_two_both_variants():
    rng = np.random.default_rng(0)
    p, n = 40, 12
    Phi = rng.standard_normal((p, 6))
    X = Phi @ rng.standard_normal((6, 2)) @ rng.standard_normal((2, n))
    X += 1e-8 * rng.standard_normal((p, n))
    assert estimate_k(X, None, 5) == 2
    assert estimate_k(X, build_projection(Phi), 5) == 2


def test_estimate_k_identity_projection_agrees():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((8, 6)) + np.outer(rng.standard_normal(8), rng.standard_normal(6)) * 3
    ctx = build_projection(np.eye(8))
    assert estimate_k(X, None, 4) == estimate_k(X, ctx, 4)


def test_estimate_k_projected_kmax_bound():
    ctx = build_projection(np.random.default_rng(2).standard_normal((10, 3)))
    with pytest.raises(ValidationError):
        estimate_k(np.ones((10, 5)), ctx, 3)


def _indicator_ctx(p, J, rng):
    labels = np.r_[np.arange(1, J + 1), rng.integers(1, J + 1, size=p - J)].astype(float)
    return projection_from_covariates(labels, BasisSpec("indicator", J=J))


def test_statistic_zero_when_loadings_orthogonal():
    rng = np.random.default_rng(3)
    p, J, K = 50, 5, 2
    ctx = _indicator_ctx(p, J, rng)
    L = ctx.apply_complement(rng.standard_normal((p, K)))
    assert spec_statistic(L, ctx) == pytest.approx(0.0, abs=1e-10)
    # with data built on those loadings the fitted loadings stay orthogonal
    F = np.linalg.qr(rng.standard_normal((8, K)))[0] * np.sqrt(8)
    res = spec_test(L @ F.T, ctx, K)
    assert res.S == pytest.approx(0.0, abs=1e-8)
    assert res.z == pytest.approx(-math.sqrt(J * K / 2), abs=1e-6)


def test_statistic_equals_k_when_loadings_in_span():
    rng = np.random.default_rng(4)
    p, J, K = 50, 5, 2
    ctx = _indicator_ctx(p, J, rng)
    L = ctx.apply(rng.standard_normal((p, K)))
    F = np.linalg.qr(rng.standard_normal((8, K)))[0] * np.sqrt(8)
    res = spec_test(L @ F.T, ctx, K)
    assert res.S == pytest.approx(K, abs=1e-8)
    assert res.z == pytest.approx((p * K - J * K) / math.sqrt(2 * J * K), abs=1e-6)


def test_result_fields_reproduce_z_and_p():
    rng = np.random.default_rng(5)
    ctx = _indicator_ctx(60, 6, rng)
    res = spec_test(rng.standard_normal((60, 9)), ctx, 2)
    p = 60
    assert res.z == pytest.approx((p * res.S - res.J * res.d * res.K)
                                  / math.sqrt(2 * res.J * res.d * res.K), abs=1e-12)
    assert res.p_value == pytest.approx(1 - norm.cdf(res.z), abs=1e-12)


def test_statistic_invariant_under_loading_transform():
    rng = np.random.default_rng(6)
    ctx = _indicator_ctx(40, 4, rng)
    for _ in range(20):
        L = rng.standard_normal((40, 3))
        A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        assert spec_statistic(L @ A, ctx) == pytest.approx(spec_statistic(L, ctx), abs=1e-8)


def test_statistic_bounded():
    rng = np.random.default_rng(7)
    ctx = _indicator_ctx(30, 5, rng)
    for _ in range(50):
        K = int(rng.integers(1, 4))
        S = spec_statistic(rng.standard_normal((30, K)), ctx)
        assert -1e-12 <= S <= K + 1e-12


def test_singular_loadings_reported():
    ctx = _indicator_ctx(10, 2, np.random.default_rng(8))
    with pytest.raises(NumericalError):
        spec_statistic(np.zeros((10, 1)), ctx)


def test_spec_test_needs_positive_k():
    ctx = _indicator_ctx(10, 2, np.random.default_rng(9))
    with pytest.raises(ValidationError):
        spec_test(np.ones((10, 4)), ctx, 0)


def test_bh_examples():
    assert bh_fdr([0.001, 0.02, 0.9], 0.05) == {0, 1}
    assert bh_fdr([1.0, 1.0, 1.0], 0.05) == set()
    assert bh_fdr([0.04], 0.05) == {0}
    assert bh_fdr([], 0.05) == set()


def test_bh_validation():
    with pytest.raises(ValidationError):
        bh_fdr([0.5], 0.0)
    with pytest.raises(ValidationError):
        bh_fdr([1.5], 0.1)


pvals = st.lists(st.one_of(st.floats(0, 1), st.sampled_from([0.0, 0.01, 0.02, 1.0])),
                 min_size=1, max_size=30)


@settings(max_examples=200, deadline=None)
@given(pvals, st.floats(0.001, 0.5))
def test_bh_matches_bruteforce(p, q):
    assert bh_fdr(p, q) == bh_bruteforce(p, q)


@settings(max_examples=100, deadline=None)
@given(pvals, st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_bh_monotone_in_q(p, q1, q2):
    lo, hi = sorted((q1, q2))
    assert bh_fdr(p, lo) <= bh_fdr(p, hi)


def test_batches_without_covariates_stay_in_m1():
    rng = np.random.default_rng(10)
    ds = Dataset([BatchPanel(f"b{i}", rng.standard_normal((20, 6))) for i in range(3)])
    out = assign_regimes(ds, SelectionConfig())
    assert [a.regime for a in out] == ["M1"] * 3
    assert all(a.p_value is None and a.note == "no covariates" for a in out)


def test_force_regime_and_fixed_k():
    spec = SyntheticSpec(m=2, n_i=10, p=100, K=2, seed=1, regime="pure_gamma")
    data, _ = generate(spec)
    cfg = SelectionConfig(basis=BasisSpec("indicator", J=spec.J),
                          force_regime={"b0001": "M2"}, fixed_K={"b0002": 1})
    a, b = assign_regimes(data, cfg)
    assert a.regime == "M2" and "forced" in a.note
    assert b.K == 1 and b.K_hat == 1
    with pytest.raises(ValidationError):
        assign_regimes(data, SelectionConfig(basis=cfg.basis, force_regime={"b0001": "M3"}))


def test_strong_covariate_signal_routes_to_m2():
    # strongest shipped model, loadings exactly in the span of the basis
    spec = SyntheticSpec(m=5, n_i=10, p=100, K=3, seed=20, gamma_sd=0.0,
                         B=loading_models(LOADING_STRENGTHS[-1:]))
    cfg = SelectionConfig(basis=BasisSpec("indicator", J=spec.J))
    rng = np.random.default_rng(spec.seed)
    runs, all_m2 = 20, 0
    for _ in range(runs):
        data, _ = generate(spec, rng)
        all_m2 += all(a.regime == "M2" for a in assign_regimes(data, cfg))
    assert all_m2 >= 0.95 * runs


def test_null_routes_few_batches_to_m2():
    spec = SyntheticSpec(m=40, n_i=50, p=200, K=1, seed=21, regime="pure_gamma")
    cfg = SelectionConfig(basis=BasisSpec("indicator", J=spec.J), fixed_K={})
    rng = np.random.default_rng(spec.seed)
    frac = []
    for _ in range(5):
        data, _ = generate(spec, rng)
        frac.append(np.mean([a.regime == "M2" for a in assign_regimes(data, cfg)]))
    assert np.mean(frac) <= 0.05
