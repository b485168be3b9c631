"""
Synthetic panels from the hierarchical model, the FDP Monte Carlo, and the
brute-force oracles used to check the closed-form paths.

Nothing in the production modules imports this file.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, optimize
from scipy import stats as sps

from ._rng import substream
from .ebpredict import posterior_mean_t
from .panel import ReturnsPanel, format_month, parse_month
from .prior import FamilyParams, sample_mu
from .qmlfit import FitConfig, fit_family


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class FamilySpec:
    params: FamilyParams
    n_strategies: int
    vol: float = 0.03
    # per-strategy vol drawn uniformly from this range when given
    vol_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.n_strategies < 1:
            raise ValueError("n_strategies must be >= 1")
        if not self.vol > 0:
            raise ValueError("vol must be positive")
        if self.vol_range is not None and not 0 < self.vol_range[0] <= self.vol_range[1]:
            raise ValueError("vol_range must satisfy 0 < low <= high")


@dataclass(frozen=True)
class GeneratorSpec:
    families: Dict[str, FamilySpec]
    n_months: int = 240
    start_month: int = 1963 * 12 + 1
    seed: int = 0
    factor_loading: float = 0.0

    def __post_init__(self):
        if self.n_months < 2:
            raise ValueError("n_months must be >= 2")
        if not self.families:
            raise ValueError("at least one family required")
        if not -1.0 <= self.factor_loading <= 1.0:
            raise ValueError("factor_loading must lie in [-1, 1]")

    def to_dict(self):
        fams = {}
        for name, fs in self.families.items():
            d = {"params": fs.params.to_dict(), "n_strategies": fs.n_strategies, "vol": fs.vol}
            if fs.vol_range is not None:
                d["vol_range"] = list(fs.vol_range)
            fams[name] = d
        return {"n_months": self.n_months, "start_month": format_month(self.start_month),
                "seed": self.seed, "factor_loading": self.factor_loading, "families": fams}

    @classmethod
    def from_dict(cls, d) -> "GeneratorSpec":
        fams = {
            name: FamilySpec(FamilyParams.from_dict(f["params"]), int(f["n_strategies"]),
                             float(f.get("vol", 0.03)),
                             tuple(f["vol_range"]) if f.get("vol_range") else None)
            for name, f in d["families"].items()
        }
        return cls(fams, int(d.get("n_months", 240)), parse_month(d.get("start_month", "1963-01")),
                   int(d.get("seed", 0)), float(d.get("factor_loading", 0.0)))

    @classmethod
    def from_json(cls, text: str) -> "GeneratorSpec":
        return cls.from_dict(json.loads(text))


def generate_panel(spec: GeneratorSpec):
    """Simulate monthly returns from the model.

    Strategy i gets ``mu_i`` from its family prior and i.i.d. monthly returns
    ``N(mu_i * s_i / sqrt(T), s_i^2)``, so its full-sample t-stat is roughly
    ``N(mu_i, 1)``. With a factor loading b, the noise is
    ``s_i (b f_t + sqrt(1 - b^2) e_it)`` for a common N(0, 1) factor f_t.

    Returns ``(panel, truth)``; ``truth`` has columns strategy_id, family,
    mu_t, true_mean, vol, se.
    """
    T = spec.n_months
    months = spec.start_month + np.arange(T)
    b = spec.factor_loading
    factor = substream(spec.seed, "gen", "factor").standard_normal(T) if b else None
    ids, fams, blocks, truth = [], [], [], []
    for name in sorted(spec.families):
        fs = spec.families[name]
        rng = substream(spec.seed, "gen", name)
        n = fs.n_strategies
        mu = sample_mu(fs.params, n, rng)
        if fs.vol_range is None:
            vol = np.full(n, fs.vol)
        else:
            vol = rng.uniform(fs.vol_range[0], fs.vol_range[1], n)
        mean = mu * vol / math.sqrt(T)
        noise = rng.standard_normal((n, T))
        if b:
            noise = b * factor[None, :] + math.sqrt(1.0 - b * b) * noise
        blocks.append(mean[:, None] + vol[:, None] * noise)
        sid = np.array([f"{name}-{i:06d}" for i in range(n)], dtype=object)
        ids.append(sid)
        fams.append(np.full(n, name, dtype=object))
        truth.append(pd.DataFrame({"strategy_id": sid, "family": name, "mu_t": mu, "true_mean": mean,
                                   "vol": vol, "se": vol / math.sqrt(T)}))
    panel = ReturnsPanel.from_arrays(np.concatenate(ids), np.concatenate(fams), months, np.vstack(blocks))
    truth = pd.concat(truth, ignore_index=True).sort_values("strategy_id", kind="stable").reset_index(drop=True)
    return panel, truth


# --- FDP Monte Carlo --------------------------------------------------------

@dataclass
class FdpSimResult:
    bins: pd.DataFrame
    fdp: np.ndarray = field(repr=False)
    n_discoveries: np.ndarray = field(repr=False)
    mean_fdp: float
    fdp_percentiles: Dict[str, float]
    n_sims: int
    n_strategies: int
    hurdle: float
    null_band: float
    n_zero_discovery: int
    # per-simulation bin shares (NaN rows for simulations with no discoveries)
    shares: np.ndarray = field(repr=False, default=None)

    def summary(self):
        return {"mean_fdp": self.mean_fdp, "fdp_percentiles": self.fdp_percentiles,
                "n_sims": self.n_sims, "n_strategies": self.n_strategies, "hurdle": self.hurdle,
                "null_band": self.null_band, "n_zero_discovery": self.n_zero_discovery,
                "mean_discoveries": float(np.mean(self.n_discoveries))}


def fdp_simulate(p: FamilyParams, n_strat: int, h: float, n_sims: int, null_band: float = 0.1,
                 seed=0, bin_width: Optional[float] = None, n_bins: int = 40,
                 exclude_empty: bool = False) -> FdpSimResult:
    """Distribution of the false discovery proportion at a fixed hurdle.

    Each simulation draws independent ``mu`` from ``p`` and ``t = mu + Z``,
    keeps ``|t| > h``, and records FDP = share of kept strategies with
    ``|mu| <= null_band``. Kept strategies are also histogrammed by ``|mu|``
    (bins of ``bin_width``, default ``null_band``; the last bin is open).
    A simulation with no discoveries has FDP 0 unless ``exclude_empty``.
    """
    if not h > 0 or not null_band > 0:
        raise ValueError("h and null_band must be positive")
    w = null_band if bin_width is None else bin_width
    edges = w * np.arange(n_bins + 1)
    rng = substream(seed, "fdp-sim")
    fdp = np.zeros(n_sims)
    n_disc = np.zeros(n_sims, dtype=np.int64)
    shares = np.full((n_sims, n_bins), np.nan)
    for s in range(n_sims):
        mu = sample_mu(p, n_strat, rng)
        t = mu + rng.standard_normal(n_strat)
        am = np.abs(mu[np.abs(t) > h])
        n_disc[s] = am.size
        if am.size:
            fdp[s] = np.mean(am <= null_band)
            idx = np.minimum((am // w).astype(np.int64), n_bins - 1)
            shares[s] = np.bincount(idx, minlength=n_bins) / am.size
    empty = n_disc == 0
    used = fdp[~empty] if exclude_empty else fdp
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bins = pd.DataFrame({
            "bin_left": edges[:-1],
            "bin_right": np.append(edges[1:-1], np.inf),
            "mean_share": np.nanmean(shares, axis=0),
            "p05_share": np.nanpercentile(shares, 5, axis=0),
            "p95_share": np.nanpercentile(shares, 95, axis=0),
        })
    pct = {f"p{q:02d}": float(np.percentile(used, q)) if used.size else float("nan") for q in (5, 50, 95)}
    return FdpSimResult(bins=bins, fdp=fdp, n_discoveries=n_disc,
                        mean_fdp=float(np.mean(used)) if used.size else float("nan"),
                        fdp_percentiles=pct, n_sims=n_sims, n_strategies=n_strat, hurdle=h,
                        null_band=null_band, n_zero_discovery=int(empty.sum()), shares=shares)


def _tail_prob(mu, h):
    """Pr(|mu + Z| > h)."""
    return sps.norm.sf(h - mu) + sps.norm.cdf(-h - mu)


def expected_fdp(p: FamilyParams, h: float, null_band: float = 0.1) -> float:
    """E[false discoveries] / E[discoveries] for one strategy drawn from ``p``."""
    disc = 0.0
    false = 0.0
    for wk, th, s in p.components():
        if wk == 0:
            continue
        V = s * s + 1.0
        disc += wk * (sps.norm.sf((h - th) / math.sqrt(V)) + sps.norm.cdf((-h - th) / math.sqrt(V)))
        if s == 0:
            false += wk * (abs(th) <= null_band) * _tail_prob(th, h)
        else:
            val, _ = integrate.quad(lambda m: sps.norm.pdf(m, th, s) * _tail_prob(m, h),
                                    -null_band, null_band, epsabs=0, epsrel=1e-10)
            false += wk * val
    return false / disc if disc > 0 else 0.0


# --- oracles ----------------------------------------------------------------

def oracle_posterior_moments(t: float, p: FamilyParams, tol: float = 1e-10):
    """Posterior mean and variance of mu given t by adaptive quadrature.

    Integrates ``mu^j phi(t - mu) g(mu)`` component by component over a
    window of +-40 sds around where the integrand concentrates, with
    breakpoints; point-mass components enter as exact summands.

    Raises:
        QuadratureError: if quad reports an error above ``tol`` (relative).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    t = float(t)
    Z = N1 = N2 = 0.0
    for wk, th, s in p.components():
        if wk == 0:
            continue
        if s == 0:
            like = wk * sps.norm.pdf(t - th)
            Z += like
            N1 += like * th
            N2 += like * th * th
            continue
        c = (s * s * t + th) / (s * s + 1.0)
        sd = s / math.sqrt(s * s + 1.0)
        # integrate in u = (m - c) / sd so that very narrow components stay resolvable;
        # the exponent is written in u directly because c + sd * u can round back to c
        a0 = s * (t - th) / (s * s + 1.0)  # (c - th) / s
        r = math.sqrt(s * s + 1.0)
        pts = [-16, -8, -4, -2, -1, 0, 1, 2, 4, 8, 16]
        logf = lambda u: -0.5 * ((t - c) - sd * u) ** 2 - 0.5 * (a0 + u / r) ** 2  # noqa: E731
        peak = logf(0.0)
        moments = []
        for j in range(3):

            def f(u, j=j, c=c, sd=sd, logf=logf, peak=peak):
                return (c + sd * u) ** j * math.exp(logf(u) - peak)

            # moments 1 and 2 can be near zero; bound their error on the scale of the mass
            scale = moments[0] * max(abs(c), sd, 1.0) ** j if j else 0.0
            with warnings.catch_warnings():
                warnings.simplefilter("error", integrate.IntegrationWarning)
                try:
                    val, err = integrate.quad(f, -40.0, 40.0, points=pts, epsabs=1e-3 * tol * scale,
                                              epsrel=max(1e-3 * tol, 1e-13), limit=500)
                except integrate.IntegrationWarning as exc:
                    raise QuadratureError(f"quadrature did not converge: {exc}") from None
            ref = abs(val) if j == 0 else scale
            if err > tol * ref and err > 1e-300:
                raise QuadratureError(f"achieved relative error {err / ref:.3g} > tol {tol}")
            moments.append(val)
        # dm = sd du, and sd / s = 1 / sqrt(1 + s^2)
        w = wk * math.exp(peak) / (2.0 * math.pi * math.sqrt(s * s + 1.0))
        Z += w * moments[0]
        N1 += w * moments[1]
        N2 += w * moments[2]
    mean = N1 / Z
    return mean, N2 / Z - mean * mean


def oracle_posterior_mean(t: float, p: FamilyParams, tol: float = 1e-10) -> float:
    return oracle_posterior_moments(t, p, tol)[0]


def trapezoid_posterior_mean(t: float, p: FamilyParams, n_points: int = 400001) -> float:
    """Posterior mean by the trapezoid rule on a dense uniform grid."""
    t = float(t)
    spread = max(1.0, p.sigma1, p.sigma2)
    lo = min(t, p.theta1, p.theta2) - 15 * spread
    hi = max(t, p.theta1, p.theta2) + 15 * spread
    grid = np.linspace(lo, hi, n_points)
    Z = N1 = 0.0
    for wk, th, s in p.components():
        if wk == 0:
            continue
        if s == 0:
            like = wk * sps.norm.pdf(t - th)
            Z += like
            N1 += like * th
            continue
        f = wk * sps.norm.pdf(t - grid) * sps.norm.pdf(grid, th, s)
        Z += integrate.trapezoid(f, grid)
        N1 += integrate.trapezoid(grid * f, grid)
    return N1 / Z


def oracle_fdr_hurdle(tstats, q_star: float, pi: float) -> float:
    """Brute-force hurdle for ``Pr(|Z|>h) / share(|t|>h) * pi <= q``.

    Scans every distinct observed |t| from the smallest, counting the
    discovery set directly, and locates the hurdle inside the first feasible
    interval with a root finder.
    """
    a = np.abs(np.asarray(tstats, dtype=float))
    n = a.size
    if pi <= 0:
        return 0.0
    prev = 0.0
    for v in np.unique(a):
        if v <= 0:
            continue
        c = np.count_nonzero(a >= v)
        ratio = lambda h: 2.0 * sps.norm.sf(h) * pi / (c / n) - q_star  # noqa: E731
        if ratio(v) <= 0:
            if ratio(prev) <= 0:
                return float(prev)
            return float(optimize.brentq(ratio, prev, v, xtol=1e-14, rtol=1e-15))
        prev = v
    return math.inf


# --- selection-equivalence harness ------------------------------------------

def _top(values: np.ndarray, k: int, two_sided: bool) -> set:
    key = np.abs(values) if two_sided else values
    order = np.lexsort((np.arange(values.size), -key))
    return set(order[:k].tolist())


def prop1_harness(spec: GeneratorSpec, top_pct: float = 0.01, n_reps: int = 50, seed=0,
                  mode: str = "true", fit_cfg: Optional[FitConfig] = None,
                  two_sided: bool = False) -> pd.DataFrame:
    """Overlap of naive and EB top-``top_pct`` selections over replications.

    Strategy-level simulation of a single family: ``t_i = mu_i + Z_i``,
    measured performance ``r_i = t_i * se_i`` with ``se_i = vol_i / sqrt(T)``
    known exactly. Naive selection takes the largest ``r_i``; EB takes the
    largest ``E(mu_i | t_i) * se_i``, using the true prior (``mode="true"``)
    or a QML fit to the replication's t-stats (``mode="fitted"``).
    One-sided by default, as in ``{i: r_i > h}``.
    """
    if len(spec.families) != 1:
        raise ValueError("prop1_harness needs a single-family spec")
    if mode not in ("true", "fitted"):
        raise ValueError("mode must be 'true' or 'fitted'")
    (name, fs), = spec.families.items()
    n = fs.n_strategies
    k = max(1, math.ceil(top_pct * n))
    rows = []
    for rep in range(n_reps):
        rng = substream(seed, "prop1", rep)
        mu = sample_mu(fs.params, n, rng)
        t = mu + rng.standard_normal(n)
        if fs.vol_range is None:
            se = np.full(n, fs.vol / math.sqrt(spec.n_months))
        else:
            se = rng.uniform(*fs.vol_range, n) / math.sqrt(spec.n_months)
        if mode == "true":
            prm = fs.params
        else:
            cfg = fit_cfg or FitConfig()
            prm = fit_family(t, FitConfig(**{**cfg.__dict__, "seed": rep})).params
        naive = _top(t * se, k, two_sided)
        eb = _top(posterior_mean_t(t, prm) * se, k, two_sided)
        common = len(naive & eb)
        rows.append({"rep": rep, "n_selected": k, "n_common": common,
                     "overlap": common / len(naive | eb)})
    return pd.DataFrame(rows)
