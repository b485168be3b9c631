"""
Selection backtests: top-X% portfolios chosen each year by EB predicted
Sharpe ratio or by raw in-sample Sharpe ratio, and the grouped-sort check of
EB predictions against out-of-sample returns.

Timing: the estimation window for forecast year y ends in December of y and
the portfolio is held from January to December of y + 1.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .ebpredict import predict
from .panel import ReturnsPanel, month_code, month_year, summarize, window
from .prior import FamilyParams, ModelSpec
from .qmlfit import FitConfig, fit_all

logger = logging.getLogger(__name__)

SORT_COLUMNS = ("family", "era", "group", "n_years", "n_strategies", "in_sample_mean_ann",
                "predicted_mean_ann", "oos_mean_ann", "oos_se_ann", "n_oos_months")


@dataclass(frozen=True)
class BacktestConfig:
    first_forecast_year: int
    last_forecast_year: int
    window_months: int = 240
    top_pct: float = 0.01
    rule: str = "eb"
    families: Optional[Tuple[str, ...]] = None
    min_obs: int = 60
    periods_per_year: int = 12

    def __post_init__(self):
        if self.last_forecast_year < self.first_forecast_year:
            raise ValueError("last_forecast_year must be >= first_forecast_year")
        if not 0 < self.top_pct <= 1:
            raise ValueError(f"top_pct must lie in (0, 1], got {self.top_pct}")
        if self.rule not in ("eb", "naive"):
            raise ValueError(f"rule must be 'eb' or 'naive', got {self.rule!r}")
        if self.window_months < self.min_obs:
            raise ValueError("window_months must be >= min_obs")

    @property
    def years(self):
        return list(range(self.first_forecast_year, self.last_forecast_year + 1))


@dataclass
class BacktestResult:
    returns: pd.Series
    n_strats_per_year: pd.Series
    selections: Dict[int, pd.DataFrame] = field(repr=False)
    mean_ret_ann: float
    tstat: float
    sharpe_ann: float
    cumret: pd.Series = field(repr=False)
    diagnostics: dict = field(default_factory=dict)

    def summary(self):
        return {"mean_ret_ann": self.mean_ret_ann, "tstat": self.tstat, "sharpe_ann": self.sharpe_ann,
                "n_months": int(self.returns.size),
                "n_strats_per_year": {int(k): int(v) for k, v in self.n_strats_per_year.items()},
                **self.diagnostics}


def window_stats(panel: ReturnsPanel, year: int, window_months: int = 240, min_obs: int = 60,
                 families=None) -> pd.DataFrame:
    """Strategy stats on the window ending December of ``year``."""
    w = window(panel, month_code(year, 12), window_months)
    if families is not None:
        w = w.select_families(families)
    return summarize(w, min_obs)


def _check_coverage(panel: ReturnsPanel, cfg: BacktestConfig):
    if panel.is_empty:
        raise ValueError("panel is empty")
    need_start = month_code(cfg.first_forecast_year, 12) - cfg.window_months + 1
    if panel.months[0] > need_start:
        raise ValueError(f"panel starts {month_year(panel.months[0])} but the first window needs "
                         f"{month_year(need_start)}")
    if panel.months[-1] < month_code(cfg.last_forecast_year + 1, 12):
        raise ValueError(f"panel ends {month_year(panel.months[-1])}, before the last holding year "
                         f"{cfg.last_forecast_year + 1}")


def fit_models(panel: ReturnsPanel, cfg: BacktestConfig, fit_cfg: Optional[FitConfig] = None,
               warm_starts: Optional[int] = None, workers: int = 1,
               warm_rhobeg: Optional[float] = None) -> Dict[int, ModelSpec]:
    """One fitted ModelSpec per forecast year.

    With ``warm_starts`` set, years after the first use that many starts
    beginning from the previous year's fit (the inits count toward it).
    ``warm_rhobeg`` overrides the initial trust radius for those warm fits;
    consecutive windows overlap heavily so the optimum moves little.
    """
    fit_cfg = fit_cfg or FitConfig()
    models = {}
    prev = None
    for y in cfg.years:
        stats = window_stats(panel, y, cfg.window_months, cfg.min_obs, cfg.families)
        if prev is not None and warm_starts is not None:
            kw = {**fit_cfg.__dict__, "n_starts": warm_starts, "seed": fit_cfg.seed + y}
            if warm_rhobeg is not None:
                kw["rhobeg"] = warm_rhobeg
            c = FitConfig(**kw)
            models[y] = fit_all(stats, c, workers=workers, init=prev)
        else:
            c = FitConfig(**{**fit_cfg.__dict__, "seed": fit_cfg.seed + y})
            models[y] = fit_all(stats, c, workers=workers)
        prev = models[y]
        logger.info("fitted %d families for %d", len(models[y].params), y)
    return models


def _rank_select(stats: pd.DataFrame, model, cfg: BacktestConfig) -> pd.DataFrame:
    """Signed top-``top_pct`` strategies; ties at the cutoff go to the smaller id."""
    if cfg.rule == "eb":
        pred = predict(stats, model, cfg.periods_per_year)
        score = pred["pred_sharpe_ann"].to_numpy()
        sign = pred["sign"].to_numpy()
    else:
        t = stats["tstat"].to_numpy()
        score = np.abs(t) / np.sqrt(stats["n_obs"].to_numpy()) * math.sqrt(cfg.periods_per_year)
        sign = np.where(stats["mean_ret"].to_numpy() < 0, -1, 1)
    ids = stats["strategy_id"].to_numpy()
    k = math.ceil(cfg.top_pct * len(stats))
    order = np.lexsort((ids.astype(str), -score))[:k]
    return pd.DataFrame({"strategy_id": ids[order], "family": stats["family"].to_numpy()[order],
                         "sign": sign[order].astype(np.int64), "score": score[order]})


def select_year(panel: ReturnsPanel, year: int, model, cfg: BacktestConfig) -> pd.DataFrame:
    stats = window_stats(panel, year, cfg.window_months, cfg.min_obs, cfg.families)
    if stats.empty:
        raise ValueError(f"no strategies pass the filters in the window ending {year}-12")
    return _rank_select(stats, model, cfg)


def _hold_matrix(panel: ReturnsPanel, sel: pd.DataFrame, year: int):
    idx = panel.row_index()
    rows = np.array([idx[s] for s in sel["strategy_id"]], dtype=np.int64)
    cols = np.flatnonzero((panel.months >= month_code(year, 1)) & (panel.months <= month_code(year, 12)))
    R = panel.returns[np.ix_(rows, cols)] * sel["sign"].to_numpy()[:, None]
    return panel.months[cols], R


def perf_stats(r: np.ndarray, periods_per_year: int = 12):
    """(annualized mean, t-stat, annualized Sharpe) of a return series."""
    r = np.asarray(r, dtype=float)
    if r.size < 2:
        return float("nan"), float("nan"), float("nan")
    m = r.mean()
    sd = r.std(ddof=1)
    return m * periods_per_year, m / (sd / math.sqrt(r.size)), m / sd * math.sqrt(periods_per_year)


def run_backtest(panel: ReturnsPanel, model_per_year: Optional[Dict[int, ModelSpec]],
                 cfg: BacktestConfig) -> BacktestResult:
    """Annually rebalanced, signed, equal-weight top-X% portfolio.

    Each month's return is the mean over selected strategies that have a
    return that month; months where none do are skipped and counted in
    ``diagnostics["skipped_months"]``.
    """
    _check_coverage(panel, cfg)
    if cfg.rule == "eb":
        if model_per_year is None:
            raise ValueError("rule 'eb' needs a model for every forecast year")
        missing = [y for y in cfg.years if y not in model_per_year]
        if missing:
            raise ValueError(f"no model for forecast years {missing}")
    months, rets, counts, sels, skipped = [], [], {}, {}, []
    for y in cfg.years:
        sel = select_year(panel, y, model_per_year[y] if cfg.rule == "eb" else None, cfg)
        sels[y] = sel
        counts[y] = len(sel)
        m, R = _hold_matrix(panel, sel, y + 1)
        have = ~np.isnan(R)
        n = have.sum(axis=0)
        for j in range(m.size):
            if n[j] == 0:
                skipped.append(int(m[j]))
                continue
            months.append(int(m[j]))
            rets.append(R[have[:, j], j].mean())
    if skipped:
        logger.warning("%d holding months had no member returns", len(skipped))
    r = pd.Series(rets, index=pd.Index(months, name="month"), name="ret", dtype=float)
    mean_ann, tstat, sharpe = perf_stats(r.to_numpy(), cfg.periods_per_year)
    start = (months[0] - 1) if months else month_code(cfg.first_forecast_year + 1, 1) - 1
    cum = pd.concat([pd.Series([1.0], index=[start]), (1.0 + r).cumprod()])
    cum.index.name = "month"
    cum.name = "value"
    return BacktestResult(returns=r, n_strats_per_year=pd.Series(counts, name="n_strategies"),
                          selections=sels, mean_ret_ann=mean_ann, tstat=tstat, sharpe_ann=sharpe,
                          cumret=cum, diagnostics={"skipped_months": skipped})


def expected_returns(result: BacktestResult, true_mean: pd.Series) -> pd.Series:
    """Month-by-month expected portfolio return given true monthly means.

    ``true_mean`` maps strategy_id to its true mean monthly return. Assumes
    every member reports every holding month, as in generated panels.
    """
    out = {}
    for y, sel in result.selections.items():
        e = float(np.mean(true_mean.loc[sel["strategy_id"]].to_numpy() * sel["sign"].to_numpy()))
        for m in range(month_code(y + 1, 1), month_code(y + 1, 12) + 1):
            if m in result.returns.index:
                out[m] = e
    return pd.Series(out, name="expected_ret").sort_index()


def selection_overlap(panel: ReturnsPanel, model_per_year: Dict[int, ModelSpec],
                      cfg: BacktestConfig) -> pd.DataFrame:
    """Per-year Jaccard overlap of the EB and naive selections."""
    rows = []
    for y in cfg.years:
        stats = window_stats(panel, y, cfg.window_months, cfg.min_obs, cfg.families)
        eb = set(_rank_select(stats, model_per_year[y], _with_rule(cfg, "eb"))["strategy_id"])
        nv = set(_rank_select(stats, None, _with_rule(cfg, "naive"))["strategy_id"])
        rows.append({"year": y, "n_selected": len(eb), "n_common": len(eb & nv),
                     "overlap": len(eb & nv) / len(eb | nv)})
    return pd.DataFrame(rows)


def _with_rule(cfg: BacktestConfig, rule: str) -> BacktestConfig:
    return BacktestConfig(**{**cfg.__dict__, "rule": rule})


def _groups(n: int, n_groups: int) -> np.ndarray:
    """Group index 1..n_groups for sorted positions 0..n-1, sizes differing by at most 1."""
    return np.arange(n) * n_groups // n + 1


def sort_accuracy(panel: ReturnsPanel, model_per_year: Dict[int, ModelSpec], family: str,
                  years: Sequence[int], split_year: int, n_groups: int = 20,
                  window_months: int = 240, min_obs: int = 60,
                  periods_per_year: int = 12) -> pd.DataFrame:
    """Predicted vs out-of-sample returns of strategies grouped by past mean.

    For each forecast year, the family's strategies are sorted by in-sample
    mean return into ``n_groups`` equal-count groups (ties by id). A group's
    prediction is the mean of its members' signed EB predicted returns
    ``E(mu|t) * se`` and its out-of-sample return is the equal-weight
    (unsigned) group return over the next 12 months. Years are pooled into
    eras ``pre`` (forecast year <= split_year) and ``post``; ``oos_se_ann`` is
    the standard error across the era's months.
    """
    if family not in panel.family_names():
        raise ValueError(f"family {family!r} not in panel")
    years = list(years)
    row_of = panel.row_index()
    if not min(years) <= split_year <= max(years):
        raise ValueError(f"split_year {split_year} outside forecast years {min(years)}..{max(years)}")
    acc = {}
    for y in years:
        stats = window_stats(panel, y, window_months, min_obs, [family])
        if stats.empty:
            continue
        pred = predict(stats, model_per_year[y], periods_per_year)
        predicted = pred["post_mean_t"].to_numpy() * stats["se"].to_numpy() * periods_per_year
        insample = stats["mean_ret"].to_numpy() * periods_per_year
        ids = stats["strategy_id"].to_numpy()
        order = np.lexsort((ids.astype(str), insample))
        grp = _groups(order.size, n_groups)
        sub = panel.take(np.array([row_of[s] for s in ids[order]], dtype=np.int64))
        cols = np.flatnonzero((sub.months >= month_code(y + 1, 1)) & (sub.months <= month_code(y + 1, 12)))
        R = sub.returns[:, cols]
        era = "pre" if y <= split_year else "post"
        for g in range(1, n_groups + 1):
            rows = grp == g
            if not rows.any():
                continue
            a = acc.setdefault((era, g), {"ins": [], "pred": [], "n": [], "oos": []})
            a["ins"].append(insample[order][rows].mean())
            a["pred"].append(predicted[order][rows].mean())
            a["n"].append(int(rows.sum()))
            with np.errstate(invalid="ignore"):
                gr = np.nanmean(R[rows], axis=0) if R.shape[1] else np.array([])
            a["oos"].extend(gr[~np.isnan(gr)].tolist())
    out = []
    for era in ("pre", "post"):
        for g in range(1, n_groups + 1):
            a = acc.get((era, g))
            if a is None:
                if any(e == era for e, _ in acc):
                    logger.warning("family %s era %s group %d has no strategies; dropped", family, era, g)
                continue
            oos = np.asarray(a["oos"])
            m = oos.mean() * periods_per_year if oos.size else float("nan")
            se = oos.std(ddof=1) / math.sqrt(oos.size) * periods_per_year if oos.size > 1 else float("nan")
            out.append({"family": family, "era": era, "group": g, "n_years": len(a["ins"]),
                        "n_strategies": int(np.mean(a["n"])), "in_sample_mean_ann": float(np.mean(a["ins"])),
                        "predicted_mean_ann": float(np.mean(a["pred"])), "oos_mean_ann": float(m),
                        "oos_se_ann": float(se), "n_oos_months": int(oos.size)})
    return pd.DataFrame(out, columns=list(SORT_COLUMNS))


def null_models(years, families) -> Dict[int, ModelSpec]:
    """The no-predictability prior for every family and year."""
    return {y: ModelSpec({f: FamilyParams.null() for f in families}) for y in years}
