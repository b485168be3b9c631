"""
Long-short strategy returns from stock-level data.

Three signal families:

* past returns: moments of 4 chosen quarterly returns out of the past 20,
  single quarterly returns, and the mean of the last 2 or 3 quarters;
* tickers: stocks grouped into 20 equal-count groups by the letter at one
  ticker position, long two groups and short two;
* accounting: level ratios X/Y and change ratios (X - lag X)/lag Y.

A signal in row ``month`` must be known at the start of that month; it
forms the portfolio whose return is that month's ``ret``. Accounting values
are taken as already aligned this way.
"""

import io
import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .panel import PanelError, ReturnsPanel, parse_month

N_QUARTERS = 20
N_TICKER_GROUPS = 20
TICKER_POSITIONS = (1, 2, 3, 4)
ACCT_DIFF_LAG = 12
KINDS = ("pastret_moment", "pastret_single", "pastret_meanK", "ticker_sort", "acct_ratio", "acct_diff_ratio")
_TICKER_RE = re.compile(r"^[A-Z]{1,5}$")


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class SignalDef:
    signal_id: str
    kind: str
    params: dict = field(compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SignalError(f"unknown signal kind {self.kind!r}")
        p = self.params
        if self.kind == "pastret_moment":
            q = tuple(p["quarters"])
            if len(set(q)) != 4 or not all(1 <= x <= N_QUARTERS for x in q):
                raise SignalError(f"{self.signal_id}: need 4 distinct quarters in 1..{N_QUARTERS}")
            if p["moment"] not in (1, 2, 3, 4):
                raise SignalError(f"{self.signal_id}: moment must be 1..4")
        elif self.kind == "ticker_sort":
            lg, sh = tuple(p["long"]), tuple(p["short"])
            g = lg + sh
            if len(lg) != 2 or len(sh) != 2 or len(set(g)) != 4 or not all(1 <= x <= N_TICKER_GROUPS for x in g):
                raise SignalError(f"{self.signal_id}: need 2 long and 2 short distinct groups in 1..20")

    def to_json(self) -> str:
        return json.dumps({"signal_id": self.signal_id, "kind": self.kind, "params": self.params},
                          sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SignalDef":
        d = json.loads(line)
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d["params"].items()}
        return cls(d["signal_id"], d["kind"], params)


def save_signal_defs(defs: Sequence[SignalDef], dest) -> None:
    text = "".join(d.to_json() + "\n" for d in defs)
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w") as fh:
            fh.write(text)


def load_signal_defs(source) -> List[SignalDef]:
    fh = open(source) if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__") else source
    try:
        return [SignalDef.from_json(line) for line in fh if line.strip()]
    finally:
        if fh is not source:
            fh.close()


# --- enumeration ------------------------------------------------------------

def enumerate_pastret_signals() -> List[SignalDef]:
    """All 19,402 past-return signals."""
    out = []
    for qs in itertools.combinations(range(1, N_QUARTERS + 1), 4):
        for m in (1, 2, 3, 4):
            sid = f"pr-m{m}-q" + "_".join(map(str, qs))
            out.append(SignalDef(sid, "pastret_moment", {"quarters": qs, "moment": m}))
    for q in range(1, N_QUARTERS + 1):
        out.append(SignalDef(f"pr-q{q}", "pastret_single", {"quarter": q}))
    for k in (2, 3):
        out.append(SignalDef(f"pr-mean{k}", "pastret_meanK", {"k": k}))
    return out


def enumerate_ticker_signals() -> List[SignalDef]:
    """All 19,380 ticker signals: the two lowest chosen groups go long."""
    out = []
    for pos in TICKER_POSITIONS:
        for g in itertools.combinations(range(1, N_TICKER_GROUPS + 1), 4):
            sid = f"tk-p{pos}-L{g[0]}_{g[1]}-S{g[2]}_{g[3]}"
            out.append(SignalDef(sid, "ticker_sort", {"position": pos, "long": g[:2], "short": g[2:]}))
    return out


def enumerate_acct_signals(var_names: Sequence[str], denom_names: Sequence[str]) -> List[SignalDef]:
    """Level and change ratios for every (variable, denominator) pair.

    The level ratio X/X is skipped; the change ratio (X - lag X)/lag X is kept.
    """
    var_names, denom_names = list(var_names), list(denom_names)
    extra = sorted(set(denom_names) - set(var_names))
    if extra:
        raise SignalError(f"denominators not among variables: {extra}")
    out = []
    for x in var_names:
        for y in denom_names:
            if x != y:
                out.append(SignalDef(f"ac-lvl-{x}-over-{y}", "acct_ratio", {"num": x, "den": y}))
            out.append(SignalDef(f"ac-dif-{x}-over-{y}", "acct_diff_ratio", {"num": x, "den": y}))
    return out


# --- stock data -------------------------------------------------------------

@dataclass
class StockPanel:
    """Stock-level monthly data on a dense (stock x month) grid.

    ``months`` is a contiguous run of month codes. Missing cells are NaN
    (numeric) or None (ticker). ``mktcap`` and ``ticker`` may be absent.
    """

    stock_ids: np.ndarray
    months: np.ndarray
    ret: np.ndarray
    mktcap: Optional[np.ndarray] = None
    ticker: Optional[np.ndarray] = None
    acct: Dict[str, np.ndarray] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "StockPanel":
        for col in ("stock_id", "month", "ret"):
            if col not in df.columns:
                raise PanelError(f"missing required column {col!r}")
        df = df.reset_index(drop=True)
        months = df["month"].map(parse_month).to_numpy(dtype=np.int64)
        sids = df["stock_id"].astype(str).to_numpy()
        dup = pd.Series(list(zip(sids, months))).duplicated()
        if dup.any():
            i = int(np.flatnonzero(dup.to_numpy())[0])
            raise PanelError(f"line {i + 2}: duplicate (stock_id, month) = ({sids[i]}, {df['month'].iloc[i]})")
        ids = np.array(sorted(set(sids.tolist())), dtype=object)
        grid = np.arange(months.min(), months.max() + 1)
        r = np.searchsorted(ids, sids)
        c = months - grid[0]

        def numeric(col):
            out = np.full((ids.size, grid.size), np.nan)
            out[r, c] = pd.to_numeric(df[col], errors="raise").to_numpy(dtype=float)
            return out

        mktcap = None
        if "mktcap" in df.columns:
            mktcap = numeric("mktcap")
            bad = np.flatnonzero(~(pd.to_numeric(df["mktcap"]).to_numpy(dtype=float) > 0)
                                 & df["mktcap"].notna().to_numpy())
            if bad.size:
                raise PanelError(f"line {int(bad[0]) + 2}: mktcap must be > 0")
        ticker = None
        if "ticker" in df.columns:
            ticker = np.full((ids.size, grid.size), None, dtype=object)
            for i, v in enumerate(df["ticker"].tolist()):
                if v is None or (isinstance(v, float) and np.isnan(v)) or v == "":
                    continue
                if not _TICKER_RE.match(str(v)):
                    raise PanelError(f"line {i + 2}: ticker {v!r} must match [A-Z]{{1,5}}")
                ticker[r[i], c[i]] = str(v)
        acct = {col[5:]: numeric(col) for col in df.columns if col.startswith("acct:")}
        return cls(ids, grid, numeric("ret"), mktcap, ticker, acct)

    @property
    def n_stocks(self) -> int:
        return int(self.stock_ids.size)

    def quarter_returns(self) -> np.ndarray:
        """Q[:, t] = compounded return over months t-3, t-2, t-1 (NaN if any missing)."""
        if "quarters" not in self._cache:
            g = 1.0 + self.ret
            Q = np.full_like(self.ret, np.nan)
            if g.shape[1] > 3:
                Q[:, 3:] = g[:, 2:-1] * g[:, 1:-2] * g[:, :-3] - 1.0
            self._cache["quarters"] = Q
        return self._cache["quarters"]


def load_stock_panel(source) -> StockPanel:
    """Read ``stock_id,month,ret[,mktcap][,ticker][,acct:<name>...]`` CSV."""
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    df = pd.read_csv(source, dtype={"stock_id": str, "month": str, "ticker": str},
                     keep_default_na=False, na_values={"ret": [""], "mktcap": [""]})
    for col in df.columns:
        if col.startswith("acct:"):
            df[col] = pd.to_numeric(df[col].replace("", np.nan))
    return StockPanel.from_frame(df)


def _lag(X: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(X, np.nan)
    if k < X.shape[1]:
        out[:, k:] = X[:, :-k]
    return out


def _quarter(Q: np.ndarray, q: int) -> np.ndarray:
    # quarter q ends 3(q-1) months before formation
    return _lag(Q, 3 * (q - 1)) if q > 1 else Q


def _acct(stocks: StockPanel, name: str) -> np.ndarray:
    if name not in stocks.acct:
        raise SignalError(f"missing accounting field 'acct:{name}'")
    return stocks.acct[name]


def compute_signal(stocks: StockPanel, sig: SignalDef) -> np.ndarray:
    """Signal values on the (stock x month) grid. Not used for ticker sorts."""
    p = sig.params
    if sig.kind.startswith("pastret"):
        Q = stocks.quarter_returns()
        if sig.kind == "pastret_single":
            return _quarter(Q, p["quarter"])
        if sig.kind == "pastret_meanK":
            return np.mean([_quarter(Q, q) for q in range(1, p["k"] + 1)], axis=0)
        X = np.stack([_quarter(Q, q) for q in p["quarters"]])
        m = X.mean(axis=0)
        if p["moment"] == 1:
            return m
        return np.mean((X - m) ** p["moment"], axis=0)
    if sig.kind == "acct_ratio":
        num, den = _acct(stocks, p["num"]), _acct(stocks, p["den"])
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, np.nan)
    if sig.kind == "acct_diff_ratio":
        num, den = _acct(stocks, p["num"]), _lag(_acct(stocks, p["den"]), ACCT_DIFF_LAG)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, (num - _lag(num, ACCT_DIFF_LAG)) / den, np.nan)
    raise SignalError(f"compute_signal does not handle kind {sig.kind!r}")


def _eligible(stocks: StockPanel, weighting: str) -> np.ndarray:
    ok = np.isfinite(stocks.ret)
    if weighting == "VW":
        if stocks.mktcap is None:
            raise SignalError("value weighting needs the 'mktcap' field")
        ok &= np.isfinite(stocks.mktcap) & (stocks.mktcap > 0)
    return ok


def _leg(stocks: StockPanel, rows: np.ndarray, j: int, weighting: str) -> float:
    r = stocks.ret[rows, j]
    if weighting == "EW":
        return float(r.mean())
    w = stocks.mktcap[rows, j]
    return float((w * r).sum() / w.sum())


def _ticker_groups(stocks: StockPanel, position: int, weighting: str) -> np.ndarray:
    """Group index (1..20, 0 = not grouped) per (stock, month); cached."""
    key = ("ticker", position, weighting)
    if key in stocks._cache:
        return stocks._cache[key]
    if stocks.ticker is None:
        raise SignalError("ticker signals need the 'ticker' field")
    ok = _eligible(stocks, weighting)
    G = np.zeros(stocks.ret.shape, dtype=np.int64)
    for j in range(stocks.months.size):
        rows = [i for i in np.flatnonzero(ok[:, j])
                if stocks.ticker[i, j] is not None and len(stocks.ticker[i, j]) >= position]
        n = len(rows)
        if n < N_TICKER_GROUPS:
            continue
        # stock_ids are sorted, so a stable sort on the letter breaks ties by id
        rows.sort(key=lambda i: stocks.ticker[i, j][position - 1])
        G[rows, j] = np.arange(n) * N_TICKER_GROUPS // n + 1
    stocks._cache[key] = G
    return G


def build_strategy_returns(stocks: StockPanel, sig: SignalDef, weighting: str = "EW",
                           n_deciles: int = 10) -> pd.Series:
    """Monthly long-short returns of one signal, indexed by month code.

    Each month, stocks with a return and a finite signal (and a positive
    mktcap for VW) are ranked by signal with ties broken by stock_id; the
    top ``m // n_deciles`` go long and the bottom as many go short. Months
    with fewer than ``2 * n_deciles`` such stocks are omitted. Ticker sorts
    use the def's groups instead of deciles.
    """
    weighting = weighting.upper()
    if weighting not in ("EW", "VW"):
        raise SignalError(f"weighting must be EW or VW, got {weighting!r}")
    if n_deciles < 1:
        raise SignalError("n_deciles must be >= 1")
    months, vals = [], []
    if sig.kind == "ticker_sort":
        G = _ticker_groups(stocks, sig.params["position"], weighting)
        lg, sh = list(sig.params["long"]), list(sig.params["short"])
        for j in range(stocks.months.size):
            g = G[:, j]
            long_rows = np.flatnonzero(np.isin(g, lg))
            short_rows = np.flatnonzero(np.isin(g, sh))
            if long_rows.size == 0 or short_rows.size == 0:
                continue
            months.append(int(stocks.months[j]))
            vals.append(_leg(stocks, long_rows, j, weighting) - _leg(stocks, short_rows, j, weighting))
    else:
        S = compute_signal(stocks, sig)
        ok = _eligible(stocks, weighting) & np.isfinite(S)
        for j in range(stocks.months.size):
            rows = np.flatnonzero(ok[:, j])
            m = rows.size
            if m < 2 * n_deciles:
                continue
            k = m // n_deciles
            order = rows[np.argsort(S[rows, j], kind="stable")]
            months.append(int(stocks.months[j]))
            # legs are averaged in row order so flipping the signal negates exactly
            top, bottom = np.sort(order[-k:]), np.sort(order[:k])
            vals.append(_leg(stocks, top, j, weighting) - _leg(stocks, bottom, j, weighting))
    return pd.Series(vals, index=pd.Index(months, name="month"), name=sig.signal_id, dtype=float)


def build_strategy_panel(stocks: StockPanel, defs: Sequence[SignalDef], weighting: str,
                         family: str, n_deciles: int = 10) -> ReturnsPanel:
    """Returns of many signals as a ReturnsPanel; ids are ``<signal_id>-<ew|vw>``."""
    series = [build_strategy_returns(stocks, d, weighting, n_deciles) for d in defs]
    ids = [f"{d.signal_id}-{weighting.lower()}" for d in defs]
    months = np.asarray(stocks.months, dtype=np.int64)
    R = np.full((len(defs), months.size), np.nan)
    for i, s in enumerate(series):
        R[i, np.searchsorted(months, s.index.to_numpy(dtype=np.int64))] = s.to_numpy()
    return ReturnsPanel.from_arrays(np.array(ids, dtype=object), np.full(len(defs), family, dtype=object),
                                    months, R)
