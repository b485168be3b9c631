import math
from itertools import combinations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from ebmine._rng import substream
from ebmine.fdr import (PR_ABS_Z_LE_1, HurdleResult, by13_pi, evaluate_hurdles, fdr_hurdle, hurdle_by13,
                        hurdle_rw, hurdle_storey, kfwer_hurdle, kfwer_stepdown, panel_tstats, storey_pi)
from ebmine.panel import ReturnsPanel
from ebmine.simgen import oracle_fdr_hurdle


def _mixed(n=10_000, seed=2024):
    rng = np.random.default_rng(seed)
    half = n // 2
    return np.concatenate([rng.standard_normal(half), 3.0 + rng.standard_normal(n - half)])


def _grid_discoveries(t, q, pi):
    """Discovery set from scanning observed |t| values (plus 0) as strict cutoffs.

    On [c, next observed value) the discovery set {|t| > c} is fixed and the
    normal tail is smallest at the right end, so that is where to check.
    """
    a = np.abs(np.asarray(t, dtype=float))
    n = a.size
    cands = np.concatenate([[0.0], np.unique(a)])
    for i, c in enumerate(cands):
        share = np.count_nonzero(a > c) / n
        if share == 0:
            continue
        nxt = cands[i + 1] if i + 1 < cands.size else np.inf
        # the tail probability is smallest just below the next observed value
        tail = 2 * sps.norm.sf(np.nextafter(nxt, -np.inf)) if np.isfinite(nxt) else 0.0
        if tail * pi / share <= q:
            return set(np.flatnonzero(a > c).tolist())
    return set()


def test_single_test_reduces_to_bh():
    res = hurdle_by13([2.5], 0.05)
    assert res.pi == 1.0
    assert res.hurdle == pytest.approx(1.959964, abs=1e-6)
    assert res.n_discoveries == 1
    assert hurdle_by13([1.9], 0.05).n_discoveries == 0
    assert hurdle_by13([-1.96], 0.05).n_discoveries == 1


def test_by_pi_harmonic():
    assert by13_pi(4) == pytest.approx(25 / 12, abs=1e-15)
    assert hurdle_by13([1, 2, 3, 4], 0.05).pi == pytest.approx(2.0833, abs=1e-4)


def test_pr_abs_z_constant():
    assert PR_ABS_Z_LE_1 == pytest.approx(0.682689, abs=1e-6)


def test_by13_matches_grid_oracle():
    t = _mixed()
    res = hurdle_by13(t, 0.01)
    want = oracle_fdr_hurdle(t, 0.01, by13_pi(t.size))
    assert res.hurdle == pytest.approx(want, abs=1e-12)
    assert set(np.flatnonzero(np.abs(t) > res.hurdle).tolist()) == _grid_discoveries(t, 0.01, res.pi)


def test_storey_matches_grid_oracle_and_is_below_by13():
    t = _mixed()
    st_res = hurdle_storey(t, 0.10)
    want = oracle_fdr_hurdle(t, 0.10, st_res.pi)
    assert st_res.hurdle == pytest.approx(want, abs=1e-12)
    assert set(np.flatnonzero(np.abs(t) > st_res.hurdle).tolist()) == _grid_discoveries(t, 0.10, st_res.pi)
    assert st_res.hurdle < hurdle_by13(t, 0.01).hurdle


def test_storey_all_strong():
    res = hurdle_storey(np.full(100, 5.0), 0.10)
    assert res.pi == 0.0
    assert res.hurdle == 0.0
    assert res.n_discoveries == 100


def test_storey_all_null():
    res = hurdle_storey(np.zeros(50), 0.10)
    assert res.pi == 1.0
    assert math.isinf(res.hurdle)
    assert res.n_discoveries == 0
    assert res.to_dict()["hurdle"] == "inf"


def test_storey_pi_formula():
    t = np.array([0.5, -0.9, 1.5, 3.0])
    assert storey_pi(t) == pytest.approx(0.5 / PR_ABS_Z_LE_1, rel=1e-14)


def test_q_validation():
    with pytest.raises(ValueError):
        hurdle_by13([1.0], 0.0)
    with pytest.raises(ValueError):
        hurdle_storey([1.0], 1.0)


tstat_lists = st.lists(st.floats(-8, 8, allow_nan=False), min_size=1, max_size=300)


@settings(max_examples=60, deadline=None)
@given(tstat_lists, st.floats(0.005, 0.3))
def test_by13_above_storey(t, q):
    assert hurdle_by13(t, q).hurdle >= hurdle_storey(t, q).hurdle


@settings(max_examples=60, deadline=None)
@given(tstat_lists, st.floats(0.005, 0.3), st.floats(0.005, 0.3))
def test_monotone_in_q(t, q1, q2):
    lo, hi = min(q1, q2), max(q1, q2)
    assert hurdle_by13(t, lo).hurdle >= hurdle_by13(t, hi).hurdle
    pi = storey_pi(t)
    assert fdr_hurdle(t, lo, pi) >= fdr_hurdle(t, hi, pi)


@settings(max_examples=60, deadline=None)
@given(tstat_lists, st.floats(0.005, 0.3), st.floats(0.2, 5.0))
def test_continuous_matches_brute_force(t, q, pi):
    h = fdr_hurdle(t, q, pi)
    want = oracle_fdr_hurdle(t, q, pi)
    if math.isinf(want):
        assert math.isinf(h)
    else:
        assert h == pytest.approx(want, abs=1e-9)
        assert set(np.flatnonzero(np.abs(t) > h).tolist()) == _grid_discoveries(t, q, pi)


@settings(max_examples=40, deadline=None)
@given(tstat_lists, st.floats(0.005, 0.3))
def test_hurdle_result_invariants(t, q):
    for res in (hurdle_by13(t, q), hurdle_storey(t, q)):
        assert res.hurdle >= 0
        assert res.n_discoveries == int(np.sum(np.abs(t) > res.hurdle))


# --- Romano-Wolf ------------------------------------------------------------

def _panel(R):
    n, T = R.shape
    return ReturnsPanel.from_arrays([f"s{i:03d}" for i in range(n)], ["acct_ew"] * n, np.arange(T), R)


def test_panel_tstats_match_naive():
    R = np.random.default_rng(0).normal(0.002, 0.03, (5, 60))
    R[2, :7] = np.nan
    t = panel_tstats(R)
    for i in range(5):
        x = R[i][~np.isnan(R[i])]
        assert t[i] == pytest.approx(x.mean() / (x.std(ddof=1) / math.sqrt(x.size)), rel=1e-12)


def test_single_strategy_rw_is_bootstrap_quantile():
    x = np.random.default_rng(5).normal(0.004, 0.04, 120)
    res = hurdle_rw(_panel(x[None, :]), 0.05, 0.05, n_boot=200, seed=11)
    # independent bootstrap with the same draws
    rng = substream(11, "rw-boot")
    idx = rng.integers(0, 120, size=(200, 120))
    d = x - x.mean()
    tb = np.empty(200)
    for b in range(200):
        s = d[idx[b]]
        tb[b] = abs(s.mean() / (s.std(ddof=1) / math.sqrt(120)))
    assert res.hurdle == pytest.approx(float(np.quantile(tb, 0.95, method="inverted_cdf")), rel=1e-12)
    assert res.diagnostics["k"] == 1


def test_rw_deterministic_small_panel():
    R = np.random.default_rng(9).normal(0.0, 0.05, (50, 60))
    R[:10] += 0.02
    a = hurdle_rw(_panel(R), 0.05, 0.05, n_boot=2000, seed=3)
    b = hurdle_rw(_panel(R.copy()), 0.05, 0.05, n_boot=2000, seed=3)
    assert a.hurdle == b.hurdle
    assert a.diagnostics == b.diagnostics
    assert a.n_discoveries == int(np.sum(np.abs(panel_tstats(R)) > a.hurdle))


def test_rw_needs_24_months():
    with pytest.raises(ValueError, match="24"):
        hurdle_rw(_panel(np.ones((2, 23))), 0.05, 0.05, n_boot=10)


def test_degenerate_bootstrap_counted():
    R = np.random.default_rng(1).normal(0, 0.05, (3, 30))
    R[0] = 0.0
    res = kfwer_hurdle(_panel(R), 1, 0.05, n_boot=50, seed=0)
    assert res.diagnostics["degenerate_boot_t"] >= 50


def _stepdown_oracle(abs_t, boot, k, q):
    def quant(cols):
        cols = list(cols)
        if len(cols) < k:
            return 0.0
        kth = np.sort(boot[:, cols], axis=1)[:, -k]
        return float(np.quantile(kth, 1 - q, method="inverted_cdf"))

    h = quant(range(abs_t.size))
    while k > 1:
        rej = [i for i in range(abs_t.size) if abs_t[i] > h]
        if len(rej) < k or math.comb(len(rej), k - 1) > 100:
            break
        keep = [i for i in range(abs_t.size) if abs_t[i] <= h]
        h_new = max(quant(keep + list(c)) for c in combinations(rej, k - 1))
        if h_new == h:
            break
        h = h_new
    return h


@pytest.mark.parametrize("k", [1, 2, 3])
def test_kfwer_stepdown_matches_oracle(k):
    rng = np.random.default_rng(40 + k)
    abs_t = np.abs(rng.normal(0, 1.5, 12)) + np.r_[np.full(4, 2.5), np.zeros(8)]
    boot = np.abs(rng.standard_normal((300, 12)))
    h, _ = kfwer_stepdown(abs_t, boot, k, 0.05)
    assert h == _stepdown_oracle(abs_t, boot, k, 0.05)


def test_kfwer_subset_cap_stops_refinement():
    abs_t = np.full(30, 10.0)
    boot = np.abs(np.random.default_rng(0).standard_normal((200, 30)))
    _, info = kfwer_stepdown(abs_t, boot, 3, 0.05)
    assert info["capped"]  # C(30, 2) = 435 > 100


def test_rw_null_panel_fwer():
    # k = 1 controls the family-wise error on pure-null panels
    reps, q = 500, 0.05
    hits = 0
    for r in range(reps):
        R = np.random.default_rng(1000 + r).normal(0.0, 0.05, (200, 120))
        res = kfwer_hurdle(_panel(R), 1, q, n_boot=2000, seed=r)
        hits += res.n_discoveries > 0
    rate = hits / reps
    assert rate <= q + 2 * math.sqrt(q * (1 - q) / reps)


# --- evaluation --------------------------------------------------------------

def _eval_inputs():
    rng = np.random.default_rng(4)
    ids = [f"s{i}" for i in range(200)]
    t = pd.Series(rng.normal(0, 2, 200), index=ids)
    oos = pd.DataFrame(rng.normal(0.0, 0.02, (200, 36)) + 0.004 * t.to_numpy()[:, None], index=ids)
    return t, oos


def test_zero_hurdle_captures_all_bins():
    t, oos = _eval_inputs()
    h0 = HurdleResult(method="storey", q_star=0.1, hurdle=0.0, n_discoveries=200)
    summary, bins = evaluate_hurdles(t, [h0], oos)
    assert len(bins) == 20
    assert summary["n_bins_captured"].iloc[0] == 20
    assert summary["n_missed"].iloc[0] == 0
    assert list(bins.columns[:5]) == ["family", "bin", "insample_t_mid", "oos_mean_ann", "oos_se_ann"]


def test_evaluate_counts_and_bin_means():
    t, oos = _eval_inputs()
    hs = [hurdle_by13(t, 0.01), hurdle_storey(t, 0.10)]
    summary, bins = evaluate_hurdles(t, hs, oos)
    for row, hr in zip(summary.itertuples(), hs):
        assert row.n_discoveries == hr.n_discoveries
    order = t.sort_values(kind="stable").index[:10]
    assert bins["oos_mean_ann"].iloc[0] == pytest.approx(oos.loc[order].mean(axis=0).mean() * 12, rel=1e-12)
    no_oos, empty = evaluate_hurdles(t, hs)
    assert empty.empty and "n_captured" not in no_oos
