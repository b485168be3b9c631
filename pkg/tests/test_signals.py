import io
import itertools
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmine.panel import PanelError, format_month, month_code
from ebmine.signals import (SignalDef, SignalError, StockPanel, build_strategy_panel, build_strategy_returns,
                            compute_signal, enumerate_acct_signals, enumerate_pastret_signals,
                            enumerate_ticker_signals, load_signal_defs, load_stock_panel, save_signal_defs)

M0 = month_code(2000, 1)


def _frame(n=20, T=3, seed=0, tickers=None, values=None):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        for j in range(T):
            row = {"stock_id": f"S{i + 1:03d}", "month": format_month(M0 + j),
                   "ret": rng.normal(0.01, 0.1), "mktcap": rng.uniform(1, 100),
                   "acct:one": 1.0,
                   "acct:x": (i + 1.0) if values is None else values[i, j]}
            if tickers is not None:
                row["ticker"] = tickers[i]
            rows.append(row)
    return pd.DataFrame(rows)


def _ratio(num="x", den="one"):
    return SignalDef(f"ac-lvl-{num}-over-{den}", "acct_ratio", {"num": num, "den": den})


# --- enumeration ---------------------------------------------------------------

def test_pastret_counts():
    defs = enumerate_pastret_signals()
    assert len(defs) == 19_402
    moments = [d for d in defs if d.kind == "pastret_moment"]
    assert len(moments) == math.comb(20, 4) * 4 == 19_380
    assert len({(tuple(d.params["quarters"]), d.params["moment"]) for d in moments}) == 19_380
    assert len({d.signal_id for d in defs}) == 19_402


def test_ticker_counts():
    defs = enumerate_ticker_signals()
    assert len(defs) == 19_380
    assert {d.params["position"] for d in defs} == {1, 2, 3, 4}
    assert len({d.signal_id for d in defs}) == 19_380
    for d in defs[:500]:
        assert not set(d.params["long"]) & set(d.params["short"])
        assert max(d.params["long"]) < min(d.params["short"])


def test_acct_counts():
    defs = enumerate_acct_signals(["a", "b"], ["b"])
    assert [d.signal_id for d in defs] == ["ac-lvl-a-over-b", "ac-dif-a-over-b", "ac-dif-b-over-b"]
    vars_ = [f"v{i}" for i in range(240)]
    big = enumerate_acct_signals(vars_, vars_[:65])
    assert len(big) == 240 * 65 * 2 - 65
    assert enumerate_acct_signals([], []) == []
    with pytest.raises(SignalError, match="zz"):
        enumerate_acct_signals(["a"], ["zz"])
    assert [d.signal_id for d in enumerate_acct_signals(vars_[:5], vars_[:2])] == \
        [d.signal_id for d in enumerate_acct_signals(vars_[:5], vars_[:2])]


def test_signal_def_validation():
    with pytest.raises(SignalError):
        SignalDef("x", "pastret_moment", {"quarters": (1, 1, 2, 3), "moment": 1})
    with pytest.raises(SignalError):
        SignalDef("x", "pastret_moment", {"quarters": (1, 2, 3, 21), "moment": 1})
    with pytest.raises(SignalError):
        SignalDef("x", "pastret_moment", {"quarters": (1, 2, 3, 4), "moment": 5})
    with pytest.raises(SignalError):
        SignalDef("x", "ticker_sort", {"position": 1, "long": (1, 2), "short": (2, 3)})
    with pytest.raises(SignalError):
        SignalDef("x", "momentum", {})


def test_jsonl_round_trip(tmp_path):
    defs = enumerate_pastret_signals()[:50] + enumerate_ticker_signals()[:50] + enumerate_acct_signals(["a"], ["a"])
    save_signal_defs(defs, tmp_path / "d.jsonl")
    back = load_signal_defs(tmp_path / "d.jsonl")
    assert back == defs
    assert [b.params for b in back] == [d.params for d in defs]
    buf = io.StringIO()
    save_signal_defs(defs, buf)
    assert buf.getvalue() == (tmp_path / "d.jsonl").read_text()


# --- stock panel ---------------------------------------------------------------

def test_from_frame_errors():
    df = _frame(3, 2)
    dup = pd.concat([df, df.iloc[[0]]], ignore_index=True)
    with pytest.raises(PanelError, match="line 8"):
        StockPanel.from_frame(dup)
    bad = df.copy()
    bad.loc[3, "mktcap"] = -1.0
    with pytest.raises(PanelError, match="line 5"):
        StockPanel.from_frame(bad)
    tk = _frame(3, 1, tickers=["AB", "abc", "C"])
    with pytest.raises(PanelError, match="line 3"):
        StockPanel.from_frame(tk)
    with pytest.raises(PanelError, match="ret"):
        StockPanel.from_frame(df.drop(columns="ret"))


def test_load_csv():
    text = ("stock_id,month,ret,mktcap,ticker,acct:be\n"
            "A,2000-01,0.01,10,AA,5\nA,2000-02,0.02,11,AA,\nB,2000-01,-0.01,,BB,3\n")
    sp = load_stock_panel(text.encode())
    assert list(sp.stock_ids) == ["A", "B"]
    assert np.isnan(sp.mktcap[1, 0])
    assert np.isnan(sp.acct["be"][0, 1])
    assert sp.ticker[1, 0] == "BB"
    assert np.isnan(sp.ret[1, 1])


def test_quarter_returns_by_hand():
    r = np.array([0.1, -0.05, 0.02, 0.03, 0.04, -0.01, 0.0, 0.05])
    sp = StockPanel(np.array(["A"], dtype=object), np.arange(8), r[None, :], None, None, {})
    Q = sp.quarter_returns()[0]
    assert np.all(np.isnan(Q[:3]))
    assert Q[3] == pytest.approx(1.1 * 0.95 * 1.02 - 1, rel=1e-15)
    assert Q[7] == pytest.approx(1.04 * 0.99 * 1.0 - 1, rel=1e-15)


def test_pastret_moments_by_hand():
    rng = np.random.default_rng(4)
    T = 70
    r = rng.normal(0.01, 0.05, T)
    sp = StockPanel(np.array(["A"], dtype=object), np.arange(T), r[None, :], None, None, {})
    j = T - 1
    qs = (1, 4, 9, 20)
    # quarter k ends 3(k-1) months before formation month j
    x = np.array([np.prod(1 + r[j - 3 * (k - 1) - 3:j - 3 * (k - 1)]) - 1 for k in qs])
    for m in (1, 2, 3, 4):
        sig = SignalDef("s", "pastret_moment", {"quarters": qs, "moment": m})
        want = x.mean() if m == 1 else np.mean((x - x.mean()) ** m)
        assert compute_signal(sp, sig)[0, j] == pytest.approx(want, rel=1e-12, abs=1e-18)
    single = compute_signal(sp, SignalDef("s", "pastret_single", {"quarter": 2}))[0, j]
    assert single == pytest.approx(np.prod(1 + r[j - 6:j - 3]) - 1, rel=1e-13)
    mean3 = compute_signal(sp, SignalDef("s", "pastret_meanK", {"k": 3}))[0, j]
    assert mean3 == pytest.approx(np.mean([np.prod(1 + r[j - 3 * i - 3:j - 3 * i]) - 1 for i in range(3)]), rel=1e-13)


def test_acct_diff_ratio_lag():
    T = 15
    vals = np.tile(np.arange(T, dtype=float) + 1.0, (20, 1))
    sp = StockPanel.from_frame(_frame(20, T, values=vals))
    s = compute_signal(sp, SignalDef("d", "acct_diff_ratio", {"num": "x", "den": "x"}))
    assert np.all(np.isnan(s[:, :12]))
    assert s[0, 13] == pytest.approx((14 - 2) / 2)


# --- returns construction ----------------------------------------------------

def test_twenty_stock_decile_sort():
    df = _frame(20, 1)
    sp = StockPanel.from_frame(df)
    out = build_strategy_returns(sp, _ratio(), "EW")
    r = df.sort_values("stock_id")["ret"].to_numpy()
    assert out.iloc[0] == pytest.approx(r[18:].mean() - r[:2].mean(), abs=1e-15)
    assert out.index[0] == M0


def test_identical_signals_tie_break_by_id():
    df = _frame(25, 1, values=np.ones((25, 1)))
    sp = StockPanel.from_frame(df)
    out = build_strategy_returns(sp, _ratio(), "EW")
    r = df.sort_values("stock_id")["ret"].to_numpy()
    assert out.iloc[0] == r[-2:].mean() - r[:2].mean()
    assert build_strategy_returns(sp, _ratio(), "EW").equals(out)


def test_too_few_stocks_month_omitted():
    vals = np.ones((19, 2))
    sp = StockPanel.from_frame(_frame(19, 2, values=vals))
    assert build_strategy_returns(sp, _ratio(), "EW").empty


def _vw_oracle(df, sig_col, n_dec=10):
    out = {}
    for m, g in df.groupby("month"):
        g = g.dropna(subset=["ret", sig_col, "mktcap"]).sort_values([sig_col, "stock_id"], kind="stable")
        k = len(g) // n_dec
        if len(g) < 2 * n_dec:
            continue
        lo, hi = g.iloc[:k], g.iloc[-k:]
        out[m] = ((hi.mktcap * hi.ret).sum() / hi.mktcap.sum()) - ((lo.mktcap * lo.ret).sum() / lo.mktcap.sum())
    return out


def test_vw_matches_direct_oracle():
    rng = np.random.default_rng(8)
    vals = rng.normal(size=(57, 6))
    df = _frame(57, 6, seed=8, values=vals)
    df.loc[rng.random(len(df)) < 0.1, "ret"] = np.nan
    sp = StockPanel.from_frame(df)
    got = build_strategy_returns(sp, _ratio(), "VW")
    df["sig"] = df["acct:x"].where(df["acct:one"] > 0)
    want = _vw_oracle(df, "sig")
    assert len(got) == len(want) == 6
    for m, v in want.items():
        assert abs(got.loc[month_code(int(m[:4]), int(m[5:]))] - v) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_rank_invariance_and_sign_flip(seed, c):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(40, 3))
    df = _frame(40, 3, seed=seed, values=vals)
    base = build_strategy_returns(StockPanel.from_frame(df), _ratio(), "EW")
    shifted = df.assign(**{"acct:x": df["acct:x"] + c})
    flipped = df.assign(**{"acct:x": -df["acct:x"]})
    assert build_strategy_returns(StockPanel.from_frame(shifted), _ratio(), "EW").equals(base)
    np.testing.assert_array_equal(build_strategy_returns(StockPanel.from_frame(flipped), _ratio(), "EW"), -base)


def test_ew_equals_vw_with_equal_caps():
    df = _frame(45, 4, seed=2, values=np.random.default_rng(2).normal(size=(45, 4)))
    df["mktcap"] = 7.0
    sp = StockPanel.from_frame(df)
    np.testing.assert_allclose(build_strategy_returns(sp, _ratio(), "VW"),
                               build_strategy_returns(sp, _ratio(), "EW"), rtol=0, atol=1e-15)


def test_missing_fields_named():
    df = _frame(20, 1)
    with pytest.raises(SignalError, match="mktcap"):
        build_strategy_returns(StockPanel.from_frame(df.drop(columns="mktcap")), _ratio(), "VW")
    with pytest.raises(SignalError, match="acct:zz"):
        build_strategy_returns(StockPanel.from_frame(df), _ratio("zz"), "EW")
    with pytest.raises(SignalError, match="ticker"):
        build_strategy_returns(StockPanel.from_frame(df), enumerate_ticker_signals()[0], "EW")
    with pytest.raises(SignalError):
        build_strategy_returns(StockPanel.from_frame(df), _ratio(), "cap")


def test_ticker_sort_groups():
    letters = [chr(ord("A") + i) for i in range(20)]
    df = _frame(20, 2, tickers=[ltr + "X" for ltr in reversed(letters)])
    sp = StockPanel.from_frame(df)
    sig = SignalDef("t", "ticker_sort", {"position": 1, "long": (1, 2), "short": (3, 4)})
    out = build_strategy_returns(sp, sig, "EW")
    g = df[df["month"] == "2000-02"].set_index("ticker")["ret"]
    assert out.loc[M0 + 1] == pytest.approx(g[["AX", "BX"]].mean() - g[["CX", "DX"]].mean(), abs=1e-15)
    # second letter is X for everyone: equal-count groups in stock_id order
    pos2 = SignalDef("t2", "ticker_sort", {"position": 2, "long": (1, 2), "short": (3, 4)})
    r = df[df["month"] == "2000-01"].sort_values("stock_id")["ret"].to_numpy()
    assert build_strategy_returns(sp, pos2, "EW").loc[M0] == pytest.approx(r[:2].mean() - r[2:4].mean(), abs=1e-15)
    # third letter missing for all tickers: no month has 20 groupable stocks
    assert build_strategy_returns(sp, SignalDef("t3", "ticker_sort", {"position": 3, "long": (1, 2),
                                                                      "short": (3, 4)}), "EW").empty


def test_strategy_panel_ids():
    sp = StockPanel.from_frame(_frame(30, 3, values=np.random.default_rng(0).normal(size=(30, 3))))
    defs = [_ratio(), SignalDef("ac-dif-x-over-one", "acct_diff_ratio", {"num": "x", "den": "one"})]
    p = build_strategy_panel(sp, defs, "VW", "acct_vw")
    assert sorted(p.strategy_ids) == ["ac-dif-x-over-one-vw", "ac-lvl-x-over-one-vw"]
    assert set(p.families) == {"acct_vw"}


def test_every_pastret_kind_builds():
    T = 70
    rng = np.random.default_rng(1)
    rows = [{"stock_id": f"S{i:02d}", "month": format_month(M0 + j), "ret": rng.normal(0.01, 0.08)}
            for i, j in itertools.product(range(30), range(T))]
    sp = StockPanel.from_frame(pd.DataFrame(rows))
    defs = enumerate_pastret_signals()
    for d in (defs[0], defs[3], defs[-22], defs[-1]):
        s = build_strategy_returns(sp, d, "EW")
        assert s.size > 0 and np.all(np.isfinite(s))
