"""
Bias-corrected predictions from t-statistics.

Under the mixture prior with N(0, 1) noise the posterior of mu given t is
again a two-component normal mixture, so its mean and variance are closed
form. Component k contributes weight ``w_k(t) ~ lam_k N(t; theta_k, V_k)``
with ``V_k = sigma_k^2 + 1``, mean ``(sigma_k^2 t + theta_k) / V_k`` and
variance ``sigma_k^2 / V_k``.
"""

import math
import warnings

import numpy as np
import pandas as pd

from .prior import FamilyParams, ModelSpec, component_log_marginals, log_marginal

PREDICTION_COLUMNS = (
    "strategy_id", "family", "tstat", "post_mean_t", "post_var_t",
    "pred_mean_ret_ann", "pred_sharpe_ann", "sign",
)


class ShrinkageClampWarning(UserWarning):
    """Cross-sectional variance below the noise variance; shrinkage clamped to 100%."""


def _posterior_parts(t, p: FamilyParams):
    t = np.asarray(t, dtype=float)
    logw = component_log_marginals(t, p)
    w = np.exp(logw - np.logaddexp(logw[0], logw[1]))
    means, vars_ = [], []
    for _, th, s in p.components():
        s2 = s * s
        means.append((s2 * t + th) / (s2 + 1.0))
        vars_.append(np.full_like(t, s2 / (s2 + 1.0)))
    return w, np.stack(means), np.stack(vars_)


def posterior_mean_t(t, p: FamilyParams):
    """E(mu | t) in t-stat units."""
    w, m, _ = _posterior_parts(t, p)
    return (w * m).sum(axis=0)


def posterior_var_t(t, p: FamilyParams):
    """Var(mu | t), by the law of total variance over components."""
    w, m, v = _posterior_parts(t, p)
    mean = (w * m).sum(axis=0)
    return np.maximum((w * (m * m + v)).sum(axis=0) - mean * mean, 0.0)


def marginal_score(t, p: FamilyParams):
    """d/dt log f(t) for the mixture marginal f."""
    t = np.asarray(t, dtype=float)
    logw = component_log_marginals(t, p)
    w = np.exp(logw - np.logaddexp(logw[0], logw[1]))
    d = np.stack([-(t - th) / (s * s + 1.0) for _, th, s in p.components()])
    return (w * d).sum(axis=0)


def posterior_mean_slope(t, p: FamilyParams):
    """d/dt E(mu | t) = 1 + d^2/dt^2 log f(t), from the mixture derivatives."""
    t = np.asarray(t, dtype=float)
    logw = component_log_marginals(t, p)
    w = np.exp(logw - np.logaddexp(logw[0], logw[1]))
    V = np.array([s * s + 1.0 for _, _, s in p.components()])[:, None]
    th = np.array([c[1] for c in p.components()])[:, None]
    d = -(t - th) / V
    f2_over_f = (w * (d * d - 1.0 / V)).sum(axis=0)
    score = (w * d).sum(axis=0)
    return 1.0 + f2_over_f - score * score


def tweedie_mean(t, p: FamilyParams, fd_step=None):
    """Tweedie's formula ``t + d/dt log f(t)``.

    With ``fd_step`` the score is taken by central differences of
    ``log f`` instead of analytically; used to self-check the analytic form.
    """
    t = np.asarray(t, dtype=float)
    if fd_step is None:
        return t + marginal_score(t, p)
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    score = (log_marginal(t + fd_step, p) - log_marginal(t - fd_step, p)) / (2.0 * fd_step)
    return t + score


def shrinkage_special_case(t, var_hat: float):
    """Posterior mean under a N(0, var_hat - 1) prior: ``(1 - 1/var_hat) t``.

    ``var_hat`` below 1 means the t-stats are tighter than pure noise; the
    result is clamped to zero and a :class:`ShrinkageClampWarning` is issued.
    """
    t = np.asarray(t, dtype=float)
    if var_hat < 1.0:
        warnings.warn(f"var_hat={var_hat} < 1; returning full shrinkage", ShrinkageClampWarning,
                      stacklevel=2)
        return np.zeros_like(t)
    return (1.0 - 1.0 / var_hat) * t


def predict(stats: pd.DataFrame, model, periods_per_year: int = 12) -> pd.DataFrame:
    """EB predictions for every row of a stats table.

    ``model`` is a :class:`ModelSpec` (looked up by each row's family) or a
    single :class:`FamilyParams` applied to all rows. Strategies are signed so
    the prediction is non-negative; a zero posterior mean gets sign +1.

    Returns a frame with columns ``PREDICTION_COLUMNS`` in the row order of
    ``stats``. ``pred_mean_ret_ann`` is ``|E(mu|t)| * se * periods_per_year``
    and ``pred_sharpe_ann`` is ``|E(mu|t)| / sqrt(n_obs) * sqrt(periods_per_year)``.
    """
    t = stats["tstat"].to_numpy(dtype=float)
    fam = stats["family"].to_numpy()
    pm = np.empty_like(t)
    pv = np.empty_like(t)
    for f in pd.unique(fam):
        rows = fam == f
        p = model if isinstance(model, FamilyParams) else model[f]
        pm[rows] = posterior_mean_t(t[rows], p)
        pv[rows] = posterior_var_t(t[rows], p)
    sign = np.where(pm < 0, -1, 1)
    apm = np.abs(pm)
    se = stats["se"].to_numpy(dtype=float)
    n = stats["n_obs"].to_numpy(dtype=float)
    return pd.DataFrame({
        "strategy_id": stats["strategy_id"].to_numpy(),
        "family": fam,
        "tstat": t,
        "post_mean_t": pm,
        "post_var_t": pv,
        "pred_mean_ret_ann": apm * se * periods_per_year,
        "pred_sharpe_ann": apm / np.sqrt(n) * math.sqrt(periods_per_year),
        "sign": sign.astype(np.int64),
    }, columns=list(PREDICTION_COLUMNS))
