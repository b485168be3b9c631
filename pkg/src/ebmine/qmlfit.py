"""
Quasi-maximum-likelihood estimation of the mixture prior.

Each family is fitted separately (the likelihood factorizes across
families). The objective treats strategies as independent, which they are
not, hence "quasi". Optimization is BOBYQA (Py-BOBYQA, or the NLopt C
implementation, or scipy's COBYQA as alternatives) from several starts:
a method-of-moments point, the null point and scrambled Halton points over
the bound box. The mixture weight is optimized on the logit scale.
"""

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import nlopt
import numpy as np
import pandas as pd
import pybobyqa
from scipy import optimize
from scipy.special import expit, logit
from scipy.stats import qmc

from ._rng import substream
from .prior import FamilyParams, ModelSpec, _loglik, log_likelihood

logger = logging.getLogger(__name__)

_LAM_EPS = 1e-12
METHODS = ("bobyqa", "nlopt", "cobyqa")


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    theta_bounds: Tuple[float, float] = (-10.0, 10.0)
    sigma_bounds: Tuple[float, float] = (0.0, 10.0)
    lambda_bounds: Tuple[float, float] = (0.0, 1.0)
    n_starts: int = 10
    max_evals: int = 5000
    tol: float = 1e-8
    seed: int = 0
    min_n: int = 50
    # extra starting points tried before the generated ones (e.g. last year's fit)
    init: Tuple[FamilyParams, ...] = ()
    rhobeg: float = 0.5
    # "bobyqa" (Py-BOBYQA), "nlopt" (NLopt's BOBYQA, much lower overhead per
    # evaluation) or "cobyqa" (scipy); all are derivative-free trust-region
    # methods on quadratic models with bound constraints
    method: str = "nlopt"

    def __post_init__(self):
        for name in ("theta_bounds", "sigma_bounds", "lambda_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must satisfy low < high, got {(lo, hi)}")
        if self.sigma_bounds[0] < 0:
            raise ValueError("sigma lower bound must be >= 0")
        if not (0.0 <= self.lambda_bounds[0] and self.lambda_bounds[1] <= 1.0):
            raise ValueError("lambda bounds must lie in [0, 1]")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class FitResult:
    params: FamilyParams
    loglik: float
    n_evals: int
    converged: bool
    start_index: int
    starts: pd.DataFrame = field(repr=False)


def _internal_bounds(cfg: FitConfig):
    lam_lo = logit(min(max(cfg.lambda_bounds[0], _LAM_EPS), 1 - _LAM_EPS))
    lam_hi = logit(min(max(cfg.lambda_bounds[1], _LAM_EPS), 1 - _LAM_EPS))
    lo = np.array([cfg.theta_bounds[0], cfg.sigma_bounds[0], cfg.theta_bounds[0], cfg.sigma_bounds[0], lam_lo])
    hi = np.array([cfg.theta_bounds[1], cfg.sigma_bounds[1], cfg.theta_bounds[1], cfg.sigma_bounds[1], lam_hi])
    return lo, hi


def _to_internal(p: FamilyParams, lo, hi) -> np.ndarray:
    lam = min(max(p.lam, _LAM_EPS), 1 - _LAM_EPS)
    x = np.array([p.theta1, p.sigma1, p.theta2, p.sigma2, logit(lam)])
    return np.clip(x, lo, hi)


def _to_params(x, cfg: FitConfig) -> FamilyParams:
    lam = float(np.clip(expit(x[4]), *cfg.lambda_bounds))
    return FamilyParams(float(x[0]), float(x[1]), float(x[2]), float(x[3]), lam)


def _start_points(t: np.ndarray, cfg: FitConfig):
    """Starting priors: user inits, moments match, null, then Halton points.

    ``cfg.n_starts`` counts all starts, inits included, but every init is kept.
    """
    var = float(np.var(t))
    mean = float(np.mean(t))
    s2 = math.sqrt(max(2.0 * (var - 1.0), 0.25))
    clip = lambda v, b: float(min(max(v, b[0]), b[1]))  # noqa: E731
    mom = FamilyParams(clip(mean, cfg.theta_bounds), clip(0.0, cfg.sigma_bounds),
                       clip(mean, cfg.theta_bounds), clip(s2, cfg.sigma_bounds),
                       clip(0.5, cfg.lambda_bounds))
    null = FamilyParams(clip(0.0, cfg.theta_bounds), clip(0.0, cfg.sigma_bounds),
                        clip(0.0, cfg.theta_bounds), clip(1.0, cfg.sigma_bounds),
                        clip(1.0, cfg.lambda_bounds))
    n_gen = max(cfg.n_starts - len(cfg.init), 0)
    starts = list(cfg.init) + [mom, null][:n_gen]
    n_rand = n_gen - 2
    if n_rand > 0:
        sampler = qmc.Halton(d=5, scramble=True, seed=substream(cfg.seed, "qml-start"))
        u = sampler.random(n_rand)
        tb, sb, lb = cfg.theta_bounds, cfg.sigma_bounds, cfg.lambda_bounds
        for row in u:
            starts.append(FamilyParams(
                tb[0] + row[0] * (tb[1] - tb[0]), sb[0] + row[1] * (sb[1] - sb[0]),
                tb[0] + row[2] * (tb[1] - tb[0]), sb[0] + row[3] * (sb[1] - sb[0]),
                lb[0] + row[4] * (lb[1] - lb[0])))
    return starts


def _run_start(t, x0, lo, hi, cfg: FitConfig):
    def objective(x):
        lam = float(expit(x[4]))
        return -_loglik(t, x[0], x[1], x[2], x[3], lam)

    rhobeg = min(cfg.rhobeg, 0.49 * float(np.min(hi - lo)))
    rhoend = min(cfg.tol, 0.1 * rhobeg)
    if cfg.method == "nlopt":
        return _run_nlopt(objective, x0, lo, hi, rhobeg, rhoend, cfg.max_evals)
    if cfg.method == "cobyqa":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol = optimize.minimize(objective, x0, method="COBYQA", bounds=optimize.Bounds(lo, hi),
                                    options={"maxfev": cfg.max_evals, "initial_tr_radius": rhobeg,
                                             "final_tr_radius": rhoend})
        return np.clip(sol.x, lo, hi), int(sol.nfev), bool(sol.success), str(sol.message)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = pybobyqa.solve(objective, x0, bounds=(lo, hi), maxfun=cfg.max_evals,
                             rhobeg=rhobeg, rhoend=rhoend, objfun_has_noise=False)
    ok = sol.flag in (sol.EXIT_SUCCESS, sol.EXIT_SLOW_WARNING)
    x = sol.x if sol.x is not None else x0
    return np.clip(x, lo, hi), int(sol.nf), bool(ok), sol.msg


def _run_nlopt(objective, x0, lo, hi, rhobeg, rhoend, max_evals):
    # keep our own record of the best point: NLopt can stop on round-off
    # with an exception, and then returns nothing
    best = [math.inf, np.array(x0, dtype=float)]
    n = [0]

    def f(x, grad):
        n[0] += 1
        v = objective(x)
        if v < best[0]:
            best[0], best[1] = v, np.array(x)
        return v

    opt = nlopt.opt(nlopt.LN_BOBYQA, len(x0))
    opt.set_lower_bounds(lo)
    opt.set_upper_bounds(hi)
    opt.set_min_objective(f)
    opt.set_initial_step(rhobeg)
    opt.set_xtol_abs(rhoend)
    opt.set_maxeval(max_evals)
    try:
        opt.optimize(np.array(x0, dtype=float))
        code = opt.last_optimize_result()
        ok = code in (nlopt.SUCCESS, nlopt.XTOL_REACHED, nlopt.FTOL_REACHED)
        msg = f"nlopt result {code}"
    except nlopt.RoundoffLimited:
        ok, msg = True, "nlopt stopped on round-off"
    return np.clip(best[1], lo, hi), n[0], bool(ok), msg


def fit_family(tstats, cfg: Optional[FitConfig] = None) -> FitResult:
    """Maximize the mixture quasi-likelihood of a cross-section of t-stats.

    The data are sorted first so the result is invariant to input order.
    The returned params are canonical (sigma1 <= sigma2) and ``loglik`` is
    recomputed at exactly those params.

    Raises:
        FitError: fewer than ``cfg.min_n`` t-stats, or non-finite values.
    """
    cfg = cfg or FitConfig()
    t = np.sort(np.asarray(tstats, dtype=float).ravel())
    if t.size < cfg.min_n:
        raise FitError(f"need at least {cfg.min_n} t-stats, got {t.size}")
    if not np.all(np.isfinite(t)):
        raise FitError("t-stats must be finite")

    lo, hi = _internal_bounds(cfg)
    rows = []
    best = None
    total_evals = 0
    for i, p0 in enumerate(_start_points(t, cfg)):
        x, nf, ok, msg = _run_start(t, _to_internal(p0, lo, hi), lo, hi, cfg)
        total_evals += nf
        p = _to_params(x, cfg).canonical()
        ll = log_likelihood(t, p)
        rows.append({"start_index": i, **{f"init_{k}": v for k, v in p0.to_dict().items()},
                     **p.to_dict(), "loglik": ll, "n_evals": nf, "converged": ok, "message": msg})
        # strict improvement keeps the lowest start index on ties
        if best is None or ll > best[1]:
            best = (p, ll, i, ok)

    p, ll, idx, ok = best
    starts = pd.DataFrame(rows)
    return FitResult(params=p, loglik=ll, n_evals=total_evals, converged=ok,
                     start_index=idx, starts=starts)


def fit_all(stats: pd.DataFrame, cfg: Optional[FitConfig] = None, families: Optional[Sequence[str]] = None,
            workers: int = 1, init: Optional[ModelSpec] = None) -> ModelSpec:
    """Fit every family present in a stats table.

    Families with fewer than ``cfg.min_n`` strategies get the null prior and
    are listed in ``model.fallback``. Per-family :class:`FitResult` objects
    are kept in ``model.fits``. ``init`` adds a previous model's params as
    extra starting points.
    """
    cfg = cfg or FitConfig()
    fams = sorted(pd.unique(stats["family"])) if families is None else list(families)
    groups = {f: stats.loc[stats["family"] == f, "tstat"].to_numpy(dtype=float) for f in fams}

    def one(f):
        t = groups[f]
        if t.size < cfg.min_n:
            logger.info("family %s has %d strategies < %d; using null prior", f, t.size, cfg.min_n)
            return None
        c = cfg
        if init is not None and f in init:
            c = FitConfig(**{**cfg.__dict__, "init": tuple(cfg.init) + (init[f],)})
        return fit_family(t, c)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, fams))
    else:
        results = [one(f) for f in fams]

    params, fits, fallback = {}, {}, []
    for f, res in zip(fams, results):
        if res is None:
            params[f] = FamilyParams.null()
            fallback.append(f)
        else:
            params[f] = res.params
            fits[f] = res
    return ModelSpec(params, fits=fits, fallback=tuple(fallback))


def starts_frame(model: ModelSpec) -> pd.DataFrame:
    """Per-start diagnostics for all fitted families, stacked."""
    frames = [r.starts.assign(family=f) for f, r in sorted(model.fits.items())]
    if not frames:
        return pd.DataFrame()
    df = pd.concat(frames, ignore_index=True)
    return df[["family"] + [c for c in df.columns if c != "family"]]
