"""
False-discovery hurdles for cross-sections of t-statistics.

``hurdle_by13`` and ``hurdle_storey`` solve

    min h > 0  s.t.  Pr(|Z| > h) / share(|t_i| > h) * pi <= q*

and differ only in the constant ``pi``: the harmonic sum ``sum_{i<=N} 1/i``
for Benjamini-Yekutieli Theorem 1.3, and the estimated null share
``share(|t_i| <= 1) / Pr(|Z| <= 1)`` (capped at 1) for Storey.

``hurdle_rw`` controls ``Pr(FDP > p*) <= q*`` with Romano-Wolf: an outer
search over k and, for each k, a bootstrap k-FWER step-down hurdle.
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats as sps

from ._rng import substream
from .panel import ReturnsPanel

logger = logging.getLogger(__name__)

PR_ABS_Z_LE_1 = 2.0 * sps.norm.cdf(1.0) - 1.0
SUBSET_CAP = 100


@dataclass
class HurdleResult:
    """A |t| threshold; strategies with ``|t| > hurdle`` are discoveries.

    ``hurdle`` is ``inf`` when no threshold satisfies the criterion.
    """

    method: str
    q_star: float
    hurdle: float
    n_discoveries: int
    pi: Optional[float] = None
    p_star: Optional[float] = None
    diagnostics: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "method": self.method, "q_star": self.q_star, "p_star": self.p_star,
            "hurdle": self.hurdle if math.isfinite(self.hurdle) else "inf",
            "n_discoveries": self.n_discoveries, "pi": self.pi,
            "diagnostics": self.diagnostics,
        }


def _check_q(q, name="q_star"):
    if not 0.0 < q < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {q}")


def two_sided_tail(h):
    """Pr(|Z| > h) for standard normal Z."""
    return 2.0 * sps.norm.sf(h)


def fdr_hurdle(tstats, q_star: float, pi: float) -> float:
    """Smallest h > 0 with ``Pr(|Z|>h) / share(|t|>h) * pi <= q_star``.

    The share is a step function of h, constant on each interval between
    consecutive distinct |t| values, while the tail probability decreases
    in h. So on the interval just below the j-th smallest |t| the condition
    holds from ``z_j = isf(q * c_j / (2 pi N))`` on, where ``c_j`` counts
    ``|t| >= a_j``; the hurdle is ``max(a_{j-1}, z_j)`` for the first
    feasible j. Returns ``inf`` if no interval is feasible.
    """
    a = np.abs(np.asarray(tstats, dtype=float).ravel())
    n = a.size
    if n == 0:
        raise ValueError("need at least one t-stat")
    if pi <= 0:
        return 0.0
    vals = np.unique(a)
    vals = vals[vals > 0]
    if vals.size == 0:
        return math.inf
    # c_j = #{|t| >= a_j}
    counts = n - np.searchsorted(np.sort(a), vals, side="left")
    target = q_star * counts / (pi * n)
    feasible = two_sided_tail(vals) <= target
    if not feasible.any():
        return math.inf
    j = int(np.argmax(feasible))
    below = vals[j - 1] if j > 0 else 0.0
    z = sps.norm.isf(target[j] / 2.0) if target[j] < 1.0 else 0.0
    return float(max(below, z))


def _result(method, t, q_star, pi, h, **diag):
    a = np.abs(np.asarray(t, dtype=float))
    return HurdleResult(method=method, q_star=q_star, hurdle=h, n_discoveries=int(np.sum(a > h)),
                        pi=pi, diagnostics=diag)


def by13_pi(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def storey_pi(tstats, null_cutoff: float = 1.0) -> float:
    a = np.abs(np.asarray(tstats, dtype=float))
    share = float(np.mean(a <= null_cutoff))
    return min(1.0, share / (2.0 * sps.norm.cdf(null_cutoff) - 1.0))


def hurdle_by13(tstats, q_star: float) -> HurdleResult:
    """Benjamini-Yekutieli Theorem 1.3 hurdle (valid under arbitrary dependence)."""
    _check_q(q_star)
    t = np.asarray(tstats, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("need at least one t-stat")
    pi = by13_pi(t.size)
    return _result("by13", t, q_star, pi, fdr_hurdle(t, q_star, pi), n_tests=int(t.size))


def hurdle_storey(tstats, q_star: float, null_cutoff: float = 1.0) -> HurdleResult:
    """Storey hurdle with the null share estimated from ``|t| <= null_cutoff``."""
    _check_q(q_star)
    t = np.asarray(tstats, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("need at least one t-stat")
    pi = storey_pi(t, null_cutoff)
    return _result("storey", t, q_star, pi, fdr_hurdle(t, q_star, pi),
                   n_tests=int(t.size), null_cutoff=null_cutoff)


# --- Romano-Wolf -----------------------------------------------------------

def panel_tstats(returns: np.ndarray) -> np.ndarray:
    """t-stats of the rows of a (strategies x months) matrix, NaN = missing."""
    mask = ~np.isnan(returns)
    n = mask.sum(axis=1)
    X = np.where(mask, returns, 0.0)
    mean = X.sum(axis=1) / n
    dev = np.where(mask, returns - mean[:, None], 0.0)
    sd = np.sqrt((dev * dev).sum(axis=1) / (n - 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        t = mean / (sd / np.sqrt(n))
    return np.where(sd > 0, t, 0.0)


def bootstrap_abs_t(returns: np.ndarray, n_boot: int, rng, chunk: int = 250):
    """|t| of strategy-demeaned returns under month resampling.

    All strategies share the resampled months in a draw, which keeps their
    cross-correlation. Returns ``(B x N array, n_degenerate)``; a strategy
    with zero resampled variance gets t = 0 and is counted.
    """
    mask = ~np.isnan(returns)
    n_obs = mask.sum(axis=1)
    X = np.where(mask, returns, 0.0)
    X = np.where(mask, X - (X.sum(axis=1) / n_obs)[:, None], 0.0)
    M = mask.astype(float)
    X2 = X * X
    T = returns.shape[1]
    out = np.empty((n_boot, returns.shape[0]))
    degenerate = 0
    for start in range(0, n_boot, chunk):
        b = min(chunk, n_boot - start)
        idx = rng.integers(0, T, size=(b, T))
        flat = (idx + T * np.arange(b)[:, None]).ravel()
        C = np.bincount(flat, minlength=b * T).reshape(b, T).astype(float)
        n = C @ M.T
        s1 = C @ X.T
        s2 = C @ X2.T
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = s1 / n
            var = (s2 - n * mean * mean) / (n - 1)
            t = mean / np.sqrt(var / n)
        bad = ~(var > 1e-14 * np.maximum(s2 / np.maximum(n, 1), 1e-300)) | (n < 2)
        degenerate += int(bad.sum())
        out[start:start + b] = np.where(bad, 0.0, np.abs(t))
    return out, degenerate


def _kth_largest_quantile(boot: np.ndarray, cols, k: int, q_star: float) -> float:
    sub = boot[:, cols]
    if sub.shape[1] < k:
        return 0.0
    kth = -np.partition(-sub, k - 1, axis=1)[:, k - 1]
    return float(np.quantile(kth, 1.0 - q_star, method="inverted_cdf"))


def kfwer_stepdown(abs_t: np.ndarray, boot: np.ndarray, k: int, q_star: float,
                   subset_cap: int = SUBSET_CAP):
    """k-FWER hurdle by bootstrap step-down.

    Start from the (1 - q*) quantile of the k-th largest bootstrap |t| over
    all strategies. For k > 1, recompute over every set made of k - 1
    currently rejected strategies plus all non-rejected ones, take the
    largest, and repeat until the hurdle stops changing. Refinement stops
    early when the number of such sets exceeds ``subset_cap``.
    Returns ``(hurdle, info)``.
    """
    n = abs_t.size
    h = _kth_largest_quantile(boot, np.arange(n), k, q_star)
    info = {"k": k, "steps": 0, "capped": False}
    if k == 1:
        return h, info
    while True:
        rejected = np.flatnonzero(abs_t > h)
        if rejected.size < k:
            break
        if math.comb(rejected.size, k - 1) > subset_cap:
            info["capped"] = True
            break
        keep = np.flatnonzero(abs_t <= h)
        h_new = max(_kth_largest_quantile(boot, np.concatenate([keep, np.array(sub, dtype=int)]), k, q_star)
                    for sub in combinations(rejected.tolist(), k - 1))
        info["steps"] += 1
        if h_new == h:
            break
        h = h_new
    return h, info


def rw_fdp_hurdle(abs_t: np.ndarray, boot: np.ndarray, p_star: float, q_star: float,
                  subset_cap: int = SUBSET_CAP):
    """FDP-risk hurdle from k-FWER hurdles, searching k by bisection.

    The procedure stops at the first k whose hurdle h_k satisfies
    ``k / (#{|t| > h_k} + 1) > p*`` and returns h_k. Bisection assumes the
    condition, once met, stays met for larger k.
    """
    n = abs_t.size
    cache = {}

    def h_of(k):
        if k not in cache:
            cache[k] = kfwer_stepdown(abs_t, boot, k, q_star, subset_cap)
        return cache[k][0]

    def stops(k):
        return k / (np.sum(abs_t > h_of(k)) + 1) > p_star

    if stops(1):
        k = 1
    else:
        lo, hi = 1, n
        if stops(hi):
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if stops(mid):
                    hi = mid
                else:
                    lo = mid
        k = hi
    trace = [{"k": kk, "hurdle": cache[kk][0], "n_rejected": int(np.sum(abs_t > cache[kk][0])),
              "steps": cache[kk][1]["steps"], "capped": cache[kk][1]["capped"]} for kk in sorted(cache)]
    return h_of(k), k, trace


def hurdle_rw(window_panel: ReturnsPanel, p_star: float = 0.05, q_star: float = 0.05,
              n_boot: int = 2000, seed=0, subset_cap: int = SUBSET_CAP) -> HurdleResult:
    """Romano-Wolf FDP-risk hurdle: ``Pr(FDP > p*) <= q*``."""
    _check_q(q_star)
    _check_q(p_star, "p_star")
    if window_panel.months.size < 24:
        raise ValueError("hurdle_rw needs at least 24 months")
    R = window_panel.returns
    abs_t = np.abs(panel_tstats(R))
    boot, degenerate = bootstrap_abs_t(R, n_boot, substream(seed, "rw-boot"))
    h, k, trace = rw_fdp_hurdle(abs_t, boot, p_star, q_star, subset_cap)
    res = HurdleResult(method="rw", q_star=q_star, p_star=p_star, hurdle=float(h),
                       n_discoveries=int(np.sum(abs_t > h)), pi=None,
                       diagnostics={"k": int(k), "n_boot": n_boot, "degenerate_boot_t": degenerate,
                                    "search": trace})
    return res


def kfwer_hurdle(window_panel: ReturnsPanel, k: int, q_star: float, n_boot: int = 2000, seed=0,
                 subset_cap: int = SUBSET_CAP) -> HurdleResult:
    """Hurdle controlling Pr(at least k false rejections) <= q*."""
    _check_q(q_star)
    R = window_panel.returns
    abs_t = np.abs(panel_tstats(R))
    boot, degenerate = bootstrap_abs_t(R, n_boot, substream(seed, "rw-boot"))
    h, info = kfwer_stepdown(abs_t, boot, k, q_star, subset_cap)
    return HurdleResult(method="kfwer", q_star=q_star, hurdle=float(h),
                        n_discoveries=int(np.sum(abs_t > h)),
                        diagnostics={**info, "n_boot": n_boot, "degenerate_boot_t": degenerate})


# --- evaluation -------------------------------------------------------------

def evaluate_hurdles(tstats: pd.Series, hurdles, oos_returns: Optional[pd.DataFrame] = None,
                     n_bins: int = 20, threshold_ann: float = 0.03, periods_per_year: int = 12,
                     family: str = "all"):
    """Compare hurdles against out-of-sample performance of t-stat bins.

    Args:
        tstats: in-sample t-stats indexed by strategy_id.
        hurdles: iterable of :class:`HurdleResult`.
        oos_returns: optional wide frame (strategy_id x month) of
            out-of-sample returns.

    Returns ``(summary, bins)``. ``bins`` has one row per equal-count bin of
    sorted t-stats (empty when no OOS returns are given); a bin is captured
    by a hurdle when its mean in-sample |t| is at or beyond the hurdle.
    """
    t = pd.Series(tstats, dtype=float)
    hurdles = list(hurdles)
    bins = pd.DataFrame(columns=["family", "bin", "insample_t_mid", "oos_mean_ann", "oos_se_ann", "n_strats"])
    if oos_returns is not None and len(t):
        order = t.sort_values(kind="stable")
        rows = []
        for b, members in enumerate(np.array_split(order.index.to_numpy(), min(n_bins, len(order))), start=1):
            sub = oos_returns.reindex(members)
            port = sub.mean(axis=0, skipna=True).dropna()
            m = port.mean() * periods_per_year if len(port) else np.nan
            se = port.std(ddof=1) / math.sqrt(len(port)) * periods_per_year if len(port) > 1 else np.nan
            rows.append({"family": family, "bin": b, "insample_t_mid": float(order.loc[members].mean()),
                         "oos_mean_ann": m, "oos_se_ann": se, "n_strats": len(members)})
        bins = pd.DataFrame(rows)

    summary = []
    for hr in hurdles:
        row = {"method": hr.method, "q_star": hr.q_star, "p_star": hr.p_star, "hurdle": hr.hurdle,
               "n_discoveries": int(np.sum(np.abs(t.to_numpy()) > hr.hurdle))}
        if len(bins):
            high = bins["oos_mean_ann"].abs() >= threshold_ann
            captured = bins["insample_t_mid"].abs() >= hr.hurdle
            row.update(n_bins=len(bins), n_high_bins=int(high.sum()),
                       n_captured=int((high & captured).sum()),
                       n_missed=int((high & ~captured).sum()),
                       n_bins_captured=int(captured.sum()))
        summary.append(row)
    return pd.DataFrame(summary), bins
