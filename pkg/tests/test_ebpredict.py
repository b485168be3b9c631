import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmine.ebpredict import (PREDICTION_COLUMNS, ShrinkageClampWarning, marginal_score, posterior_mean_slope,
                              posterior_mean_t, posterior_var_t, predict, shrinkage_special_case, tweedie_mean)
from ebmine.prior import FamilyParams, ModelSpec
from ebmine.simgen import oracle_posterior_moments

# Frozen quadrature values (scipy quad, epsrel 1e-13) for
# lam=0.5, theta=(0, 0), sigma^2=(0.01, 4), t=2.5.
ORACLE_T25_MEAN = 1.6868927567784655
ORACLE_T25_VAR = 1.195185264109004

params_st = st.builds(
    FamilyParams,
    st.floats(-3, 3), st.floats(0.0, 3), st.floats(-3, 3), st.floats(0.05, 3), st.floats(0, 1),
)


def test_null_prior_full_shrinkage():
    t = np.linspace(-8, 8, 33)
    assert np.all(posterior_mean_t(t, FamilyParams.null()) == 0.0)
    assert np.all(posterior_var_t(t, FamilyParams.null()) == 0.0)
    np.testing.assert_allclose(tweedie_mean(t, FamilyParams.null()), 0.0, atol=1e-14)


def test_conjugate_normal():
    p = FamilyParams.normal(0.0, 1.0)
    assert posterior_mean_t(3.0, p) == pytest.approx(1.5, abs=1e-15)
    np.testing.assert_allclose(posterior_var_t(np.linspace(-5, 5, 11), p), 0.5, atol=1e-15)


def test_mixture_frozen_quadrature_value():
    p = FamilyParams(0.0, 0.1, 0.0, 2.0, 0.5)
    assert abs(float(posterior_mean_t(2.5, p)) - ORACLE_T25_MEAN) < 1e-8
    assert abs(float(posterior_var_t(2.5, p)) - ORACLE_T25_VAR) < 1e-8


@settings(max_examples=30, deadline=None)
@given(params_st, st.floats(-6, 6))
def test_matches_live_quadrature(p, t):
    m, v = oracle_posterior_moments(t, p)
    assert abs(float(posterior_mean_t(t, p)) - m) < 1e-8
    assert abs(float(posterior_var_t(t, p)) - v) < 1e-8


@settings(max_examples=40, deadline=None)
@given(params_st)
def test_tweedie_identity(p):
    t = np.linspace(-5, 5, 11)
    np.testing.assert_allclose(tweedie_mean(t, p), posterior_mean_t(t, p), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(params_st)
def test_fd_score_second_order(p):
    t = np.linspace(-5, 5, 11)
    analytic = marginal_score(t, p)
    errs = []
    for h in (1e-2, 5e-3):
        fd = tweedie_mean(t, p, fd_step=h) - t
        errs.append(np.max(np.abs(fd - analytic)))
    # O(h^2): halving h cuts the error by about 4 (allow slack for tiny errors)
    assert errs[1] <= errs[0] / 3 + 1e-11


def test_fd_step_validation():
    with pytest.raises(ValueError):
        tweedie_mean(1.0, FamilyParams.null(), fd_step=0.0)


@settings(max_examples=40, deadline=None)
@given(params_st)
def test_slope_equals_posterior_variance(p):
    t = np.linspace(-5, 5, 21)
    np.testing.assert_allclose(posterior_mean_slope(t, p), posterior_var_t(t, p), atol=1e-12)
    h = 1e-4
    fd = (posterior_mean_t(t + h, p) - posterior_mean_t(t - h, p)) / (2 * h)
    np.testing.assert_allclose(fd, posterior_var_t(t, p), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(params_st)
def test_monotone_and_bounded(p):
    t = np.linspace(-8, 8, 401)
    pm = posterior_mean_t(t, p)
    assert np.all(np.diff(pm) >= -1e-12)
    assert np.all(np.abs(pm) <= np.abs(t) + max(abs(p.theta1), abs(p.theta2)) + 1e-12)
    if p.prior_var() > 0.01:
        # strictly increasing wherever the rise over one grid step is above float resolution
        v = posterior_var_t(t, p)
        rise = np.minimum(v[1:], v[:-1]) * (t[1] - t[0])
        visible = rise > 1e-12 * (1.0 + np.abs(pm[1:]))
        assert visible.any()
        assert np.all(np.diff(pm)[visible] > 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 3), st.floats(0.05, 3), st.floats(0, 1))
def test_odd_symmetry(s1, s2, lam):
    p = FamilyParams(0.0, s1, 0.0, s2, lam)
    t = np.linspace(0, 7, 15)
    np.testing.assert_allclose(posterior_mean_t(-t, p), -posterior_mean_t(t, p), atol=1e-14)


def test_shrinkage_special_case_values():
    assert np.all(shrinkage_special_case(np.linspace(-3, 3, 7), 1.0) == 0.0)
    assert shrinkage_special_case(4.0, 2.0) == 2.0
    with pytest.warns(ShrinkageClampWarning):
        out = shrinkage_special_case(np.array([1.0, 2.0]), 0.8)
    assert np.all(out == 0.0)


@pytest.mark.parametrize("v", [1.0, 1.5, 2.0, 5.0])
def test_shrinkage_matches_conjugate(v):
    t = np.linspace(-6, 6, 101)
    p = FamilyParams.normal(0.0, math.sqrt(v - 1.0))
    np.testing.assert_allclose(posterior_mean_t(t, p), shrinkage_special_case(t, v), atol=1e-12, rtol=0)


def _stats(t, n_obs=240, se=0.002, family="acct_ew"):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return pd.DataFrame({"strategy_id": [f"s{i}" for i in range(t.size)], "family": family,
                         "n_obs": n_obs, "mean_ret": t * se, "se": se, "tstat": t})


def test_predict_sharpe_convention():
    # a degenerate prior at 3 gives post_mean_t = 3 exactly
    p = FamilyParams(3.0, 0.0, 3.0, 0.0, 1.0)
    out = predict(_stats([1.0]), p)
    assert out["post_mean_t"].iloc[0] == 3.0
    assert out["pred_sharpe_ann"].iloc[0] == pytest.approx(3.0 / math.sqrt(240) * math.sqrt(12), rel=1e-14)
    assert out["pred_sharpe_ann"].iloc[0] == pytest.approx(0.6708, abs=1e-4)
    assert out["pred_mean_ret_ann"].iloc[0] == pytest.approx(3.0 * 0.002 * 12, rel=1e-14)
    assert list(out.columns) == list(PREDICTION_COLUMNS)


def test_predict_zero_and_negative_signs():
    out = predict(_stats([0.0, -2.0, 2.0]), ModelSpec({"acct_ew": FamilyParams.normal(0.0, 1.0)}))
    assert list(out["sign"]) == [1, -1, 1]
    assert out["pred_mean_ret_ann"].iloc[0] == 0.0
    assert np.all(out["pred_mean_ret_ann"] >= 0)
    assert out["pred_mean_ret_ann"].iloc[1] == out["pred_mean_ret_ann"].iloc[2]


def test_predict_monotone_in_abs_t():
    t = np.linspace(0, 8, 200)
    p = FamilyParams(0.0, 0.2, 0.0, 2.0, 0.7)
    out = predict(_stats(t), p)
    assert np.all(np.diff(out["post_mean_t"].abs().to_numpy()) >= 0)


def test_predict_uses_family_params():
    stats = pd.concat([_stats([2.0], family="acct_ew"), _stats([2.0], family="ticker_ew")], ignore_index=True)
    model = ModelSpec({"acct_ew": FamilyParams.normal(0.0, 1.0), "ticker_ew": FamilyParams.null()})
    out = predict(stats, model)
    assert out["post_mean_t"].tolist() == [1.0, 0.0]
    with pytest.raises(KeyError):
        predict(_stats([1.0], family="pastret_vw"), model)


def test_predict_partition_invariant():
    rng = np.random.default_rng(0)
    stats = _stats(rng.normal(0, 2, 100))
    stats["family"] = np.where(np.arange(100) % 2 == 0, "acct_ew", "acct_vw")
    model = ModelSpec({"acct_ew": FamilyParams(0, 0.1, 0, 2, 0.5), "acct_vw": FamilyParams(0, 0.5, 1, 1, 0.3)})
    whole = predict(stats, model)
    parts = pd.concat([predict(stats.iloc[:37], model), predict(stats.iloc[37:], model)], ignore_index=True)
    pd.testing.assert_frame_equal(whole, parts)


def test_no_warnings_for_extreme_t():
    p = FamilyParams(0.0, 0.0, 0.0, 3.0, 0.9)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pm = posterior_mean_t(np.array([-60.0, 60.0]), p)
    np.testing.assert_allclose(pm, [-60 * 0.9, 60 * 0.9])
