"""
Strategy return panels: ingestion, windowing and per-strategy summaries.

Months are integer codes ``year * 12 + month`` (month in 1..12), so that
interval arithmetic on calendar months is plain integer arithmetic.
Returns are held as a dense ``strategies x months`` matrix with NaN for
missing observations.
"""

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats as sps

logger = logging.getLogger(__name__)

KNOWN_FAMILIES = ("acct_ew", "acct_vw", "pastret_ew", "pastret_vw", "ticker_ew", "ticker_vw")

PANEL_COLUMNS = ("strategy_id", "family", "month", "ret")
STATS_COLUMNS = (
    "strategy_id", "family", "window_start", "window_end",
    "n_obs", "mean_ret", "sd_ret", "se", "tstat",
)
HIST_COLUMNS = ("family", "bin_left", "bin_right", "count", "density", "null_density")


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel input."""


def month_code(year: int, month: int) -> int:
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range: {month}")
    return year * 12 + month


def parse_month(text) -> int:
    """``'1983-06'`` -> month code. Integer codes pass through."""
    if isinstance(text, (int, np.integer)):
        return int(text)
    s = str(text).strip()
    parts = s.split("-")
    if len(parts) != 2 or len(parts[0]) != 4 or len(parts[1]) != 2:
        raise ValueError(f"month must be YYYY-MM, got {text!r}")
    return month_code(int(parts[0]), int(parts[1]))


def format_month(code: int) -> str:
    year, month = month_year(code)
    return f"{year:04d}-{month:02d}"


def month_year(code: int) -> Tuple[int, int]:
    code = int(code)
    return (code - 1) // 12, (code - 1) % 12 + 1


@dataclass(frozen=True)
class ReturnsPanel:
    """Monthly long-short returns for a set of strategies.

    Rows are strategies sorted by id, columns are sorted month codes.
    ``window`` records the (start, end) months the panel was cut to, if any.
    """

    strategy_ids: np.ndarray
    families: np.ndarray
    months: np.ndarray
    returns: np.ndarray
    window: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        ids = np.asarray(self.strategy_ids, dtype=object)
        fams = np.asarray(self.families, dtype=object)
        months = np.asarray(self.months, dtype=np.int64)
        rets = np.asarray(self.returns, dtype=np.float64)
        if rets.ndim != 2 or rets.shape != (ids.size, months.size):
            raise PanelError(f"returns shape {rets.shape} does not match ({ids.size}, {months.size})")
        if fams.shape != ids.shape:
            raise PanelError("one family per strategy required")
        if months.size > 1 and np.any(np.diff(months) <= 0):
            raise PanelError("months must be strictly increasing")
        if ids.size > 1 and len(set(ids.tolist())) != ids.size:
            raise PanelError("duplicate strategy ids")
        for arr in (ids, fams, months, rets):
            arr.flags.writeable = False
        object.__setattr__(self, "strategy_ids", ids)
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "months", months)
        object.__setattr__(self, "returns", rets)

    @classmethod
    def from_arrays(cls, strategy_ids, families, months, returns, window=None) -> "ReturnsPanel":
        """Build a panel in canonical (id-sorted, month-sorted) order."""
        ids = np.asarray(strategy_ids, dtype=object)
        months = np.asarray(months, dtype=np.int64)
        rets = np.asarray(returns, dtype=np.float64)
        row = np.argsort(ids.astype(str), kind="stable")
        col = np.argsort(months, kind="stable")
        return cls(ids[row], np.asarray(families, dtype=object)[row], months[col],
                   rets[np.ix_(row, col)], window)

    @classmethod
    def empty(cls, window=None) -> "ReturnsPanel":
        return cls(np.array([], dtype=object), np.array([], dtype=object),
                   np.array([], dtype=np.int64), np.empty((0, 0)), window)

    @property
    def n_strategies(self) -> int:
        return int(self.strategy_ids.size)

    @property
    def is_empty(self) -> bool:
        return self.n_strategies == 0

    @property
    def n_rows(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.returns)))

    def family_names(self):
        return sorted(set(self.families.tolist()))

    def take(self, rows) -> "ReturnsPanel":
        rows = np.asarray(rows)
        return ReturnsPanel(self.strategy_ids[rows], self.families[rows], self.months,
                            self.returns[rows], self.window)

    def select_families(self, families) -> "ReturnsPanel":
        keep = np.isin(self.families, list(families))
        return self.take(np.flatnonzero(keep))

    def row_index(self) -> Dict[str, int]:
        return {sid: i for i, sid in enumerate(self.strategy_ids.tolist())}

    def to_frame(self) -> pd.DataFrame:
        """Long format, one row per observed (strategy, month)."""
        r, c = np.nonzero(~np.isnan(self.returns))
        return pd.DataFrame({
            "strategy_id": self.strategy_ids[r],
            "family": self.families[r],
            "month": self.months[c],
            "ret": self.returns[r, c],
        })

    def equals(self, other: "ReturnsPanel") -> bool:
        """Exact equality of ids, families, months and returns (NaN == NaN)."""
        return (
            np.array_equal(self.strategy_ids, other.strategy_ids)
            and np.array_equal(self.families, other.families)
            and np.array_equal(self.months, other.months)
            and np.array_equal(self.returns, other.returns, equal_nan=True)
        )


def _open_text(source):
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8")), True
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def load_panel(source, schema: Optional[Dict[str, str]] = None, allow_custom: bool = False) -> ReturnsPanel:
    """Read a long-format CSV of strategy returns.

    Args:
        source: path, raw bytes, or a binary/text stream.
        schema: optional mapping from the logical columns
            (strategy_id, family, month, ret) to header names in the file.
        allow_custom: accept family labels outside ``KNOWN_FAMILIES``.

    Raises:
        PanelError: on malformed rows (naming the line), duplicate
            (strategy, month) keys, conflicting families, or unknown labels.
    """
    schema = {k: k for k in PANEL_COLUMNS} | dict(schema or {})
    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError("empty CSV: no header") from None
        header = [h.strip() for h in header]
        try:
            pos = {k: header.index(schema[k]) for k in PANEL_COLUMNS}
        except ValueError as exc:
            raise PanelError(f"missing column in header {header}: {exc}") from None

        ids, fams, months, rets = [], [], [], []
        family_of: Dict[str, str] = {}
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[pos["strategy_id"]].strip()
            fam = row[pos["family"]].strip()
            if not sid:
                raise PanelError(f"line {lineno}: empty strategy_id")
            if fam not in KNOWN_FAMILIES and not allow_custom:
                raise PanelError(f"line {lineno}: unknown family {fam!r} (pass allow_custom to accept)")
            try:
                m = parse_month(row[pos["month"]])
                r = float(row[pos["ret"]])
            except ValueError as exc:
                raise PanelError(f"line {lineno}: {exc}") from None
            if not math.isfinite(r):
                raise PanelError(f"line {lineno}: non-finite return {row[pos['ret']]!r}")
            if family_of.setdefault(sid, fam) != fam:
                raise PanelError(f"line {lineno}: strategy {sid!r} has families {family_of[sid]!r} and {fam!r}")
            key = (sid, m)
            if key in seen:
                raise PanelError(f"line {lineno}: duplicate observation ({sid}, {format_month(m)})")
            seen.add(key)
            ids.append(sid)
            months.append(m)
            rets.append(r)
    finally:
        if close:
            fh.close()

    logger.info("loaded %d rows for %d strategies", len(rets), len(family_of))
    if not rets:
        return ReturnsPanel.empty()
    uid = np.array(sorted(family_of), dtype=object)
    umonth = np.unique(np.asarray(months, dtype=np.int64))
    rix = {s: i for i, s in enumerate(uid.tolist())}
    R = np.full((uid.size, umonth.size), np.nan)
    R[[rix[s] for s in ids], np.searchsorted(umonth, months)] = rets
    fam_arr = np.array([family_of[s] for s in uid.tolist()], dtype=object)
    return ReturnsPanel(uid, fam_arr, umonth, R)


def save_panel(panel: ReturnsPanel, dest) -> None:
    """Write the long-format CSV read by :func:`load_panel` (exact float repr)."""
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_COLUMNS)
        labels = [format_month(m) for m in panel.months]
        for i in range(panel.n_strategies):
            sid, fam = panel.strategy_ids[i], panel.families[i]
            row = panel.returns[i]
            for j in np.flatnonzero(~np.isnan(row)):
                w.writerow((sid, fam, labels[j], repr(float(row[j]))))
    finally:
        if own:
            fh.close()


def window(panel: ReturnsPanel, end_month, length_months: int = 240) -> ReturnsPanel:
    """Months in ``(end_month - length_months, end_month]``; empty strategies dropped."""
    if length_months < 1:
        raise ValueError("length_months must be >= 1")
    end = parse_month(end_month)
    start = end - length_months + 1
    cols = (panel.months >= start) & (panel.months <= end)
    R = panel.returns[:, cols]
    rows = np.flatnonzero((~np.isnan(R)).any(axis=1)) if R.size else np.array([], dtype=int)
    if rows.size == 0:
        return ReturnsPanel.empty(window=(start, end))
    return ReturnsPanel(panel.strategy_ids[rows], panel.families[rows], panel.months[cols],
                        R[rows], (start, end))


def summarize(panel: ReturnsPanel, min_obs: int = 60) -> pd.DataFrame:
    """Per-strategy mean, sd, standard error and t-stat over the panel.

    Strategies with fewer than ``min_obs`` months or a constant return series
    are dropped; the counts are stored in ``result.attrs["diagnostics"]``.
    """
    if min_obs < 2:
        raise ValueError("min_obs must be >= 2")
    if panel.window is not None:
        wstart, wend = panel.window
    elif panel.months.size:
        wstart, wend = int(panel.months[0]), int(panel.months[-1])
    else:
        wstart = wend = 0

    X = panel.returns
    mask = ~np.isnan(X)
    n = mask.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        total = np.where(mask, X, 0.0).sum(axis=1)
        mean = total / n
        dev = np.where(mask, X - mean[:, None], 0.0)
        var = (dev * dev).sum(axis=1) / (n - 1)
        if X.shape[1]:
            hi = np.where(mask, X, -np.inf).max(axis=1)
            lo = np.where(mask, X, np.inf).min(axis=1)
            var = np.where(hi == lo, 0.0, var)
        sd = np.sqrt(var)
        se = sd / np.sqrt(n)
        t = mean / se

    short = n < min_obs
    flat = ~short & ~(sd > 0)
    keep = ~short & ~flat
    out = pd.DataFrame({
        "strategy_id": panel.strategy_ids[keep],
        "family": panel.families[keep],
        "window_start": wstart,
        "window_end": wend,
        "n_obs": n[keep].astype(np.int64),
        "mean_ret": mean[keep],
        "sd_ret": sd[keep],
        "se": se[keep],
        "tstat": t[keep],
    }, columns=list(STATS_COLUMNS))
    out.attrs["diagnostics"] = {
        "n_input": panel.n_strategies,
        "excluded_min_obs": int(short.sum()),
        "excluded_zero_sd": int(flat.sum()),
    }
    return out


def save_stats(stats: pd.DataFrame, dest) -> None:
    df = stats.loc[:, list(STATS_COLUMNS)].copy()
    df["window_start"] = [format_month(m) for m in df["window_start"]]
    df["window_end"] = [format_month(m) for m in df["window_end"]]
    df.to_csv(dest, index=False, float_format="%.17g", lineterminator="\n")


def load_stats(source) -> pd.DataFrame:
    df = pd.read_csv(source, dtype={"strategy_id": str, "family": str}, float_precision="round_trip")
    missing = set(STATS_COLUMNS) - set(df.columns)
    if missing:
        raise PanelError(f"stats file missing columns {sorted(missing)}")
    df["window_start"] = [parse_month(m) for m in df["window_start"]]
    df["window_end"] = [parse_month(m) for m in df["window_end"]]
    return df.loc[:, list(STATS_COLUMNS)]


def tstat_histogram(stats: pd.DataFrame, family=None, bin_width: float = 0.5) -> pd.DataFrame:
    """Density histogram of t-stats with the N(0,1) density at bin centres.

    Bins are centred on multiples of ``bin_width``: ``[(k - 1/2) w, (k + 1/2) w)``.
    ``family=None`` pools all strategies.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    sub = stats if family is None else stats[stats["family"] == family]
    t = np.asarray(sub["tstat"], dtype=float)
    label = "all" if family is None else family
    if t.size == 0:
        return pd.DataFrame(columns=list(HIST_COLUMNS))
    k = np.floor(t / bin_width + 0.5).astype(np.int64)
    ks = np.arange(k.min(), k.max() + 1)
    counts = np.bincount(k - ks[0], minlength=ks.size)
    left = (ks - 0.5) * bin_width
    right = (ks + 0.5) * bin_width
    return pd.DataFrame({
        "family": label,
        "bin_left": left,
        "bin_right": right,
        "count": counts,
        "density": counts / (t.size * bin_width),
        "null_density": sps.norm.pdf(ks * bin_width),
    }, columns=list(HIST_COLUMNS))
