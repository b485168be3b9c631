"""
Hierarchical model for strategy t-statistics.

A strategy's t-stat is ``t = mu + e`` with ``e ~ N(0, 1)``; within a family
the latent ``mu`` follows a two-component normal mixture

    mu ~ lam * N(theta1, sigma1^2) + (1 - lam) * N(theta2, sigma2^2)

so the marginal of ``t`` is the same mixture with variances ``sigma^2 + 1``.
Components with ``sigma = 0`` are point masses.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ._rng import substream

LOG_2PI = math.log(2.0 * math.pi)
DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)


class DegeneratePriorError(ValueError):
    """A point-mass component has no Lebesgue density."""


@dataclass(frozen=True)
class FamilyParams:
    """Mixture prior for one strategy family, in t-stat units.

    ``lam`` is the weight on component 1. The canonical form has
    ``sigma1 <= sigma2``; see :meth:`canonical`.
    """

    theta1: float
    sigma1: float
    theta2: float
    sigma2: float
    lam: float

    def __post_init__(self):
        vals = (self.theta1, self.sigma1, self.theta2, self.sigma2, self.lam)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"non-finite parameter in {self}")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("sigmas must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        for name in ("theta1", "sigma1", "theta2", "sigma2", "lam"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def null(cls) -> "FamilyParams":
        """No predictability: every mu is exactly zero."""
        return cls(0.0, 0.0, 0.0, 0.0, 1.0)

    @classmethod
    def normal(cls, theta: float, sigma: float) -> "FamilyParams":
        return cls(theta, sigma, theta, sigma, 1.0)

    @property
    def is_canonical(self) -> bool:
        return self.sigma1 <= self.sigma2

    def canonical(self) -> "FamilyParams":
        """Same distribution with components ordered so that sigma1 <= sigma2."""
        if self.is_canonical:
            return self
        return FamilyParams(self.theta2, self.sigma2, self.theta1, self.sigma1, 1.0 - self.lam)

    def components(self):
        """``[(weight, theta, sigma), ...]`` for the two components."""
        return [(self.lam, self.theta1, self.sigma1), (1.0 - self.lam, self.theta2, self.sigma2)]

    def prior_mean(self) -> float:
        return self.lam * self.theta1 + (1.0 - self.lam) * self.theta2

    def prior_var(self) -> float:
        m = self.prior_mean()
        return sum(w * (s * s + th * th) for w, th, s in self.components()) - m * m

    def to_dict(self) -> Dict[str, float]:
        return {"theta1": self.theta1, "sigma1": self.sigma1,
                "theta2": self.theta2, "sigma2": self.sigma2, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d) -> "FamilyParams":
        return cls(d["theta1"], d["sigma1"], d["theta2"], d["sigma2"], d["lambda"])


@dataclass
class ModelSpec:
    """Fitted prior for each family; measurement noise variance is fixed at 1.

    ``fits`` and ``fallback`` carry estimation diagnostics and are not
    serialized.
    """

    params: Dict[str, FamilyParams]
    fits: dict = field(default_factory=dict, compare=False, repr=False)
    fallback: tuple = field(default=(), compare=False)

    def __getitem__(self, family) -> FamilyParams:
        try:
            return self.params[family]
        except KeyError:
            raise KeyError(f"no prior for family {family!r}; model covers {sorted(self.params)}") from None

    def __contains__(self, family) -> bool:
        return family in self.params

    def to_json(self) -> str:
        return json.dumps({f: p.to_dict() for f, p in sorted(self.params.items())}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        raw = json.loads(text)
        return cls({f: FamilyParams.from_dict(d) for f, d in raw.items()})


def _log_weights(p: FamilyParams):
    with np.errstate(divide="ignore"):
        return np.log(p.lam), np.log1p(-p.lam)


def component_log_marginals(t, p: FamilyParams):
    """Per-component ``log(w_k) + log N(t; theta_k, sigma_k^2 + 1)``, shape (2, n)."""
    t = np.asarray(t, dtype=float)
    lw1, lw2 = _log_weights(p)
    v1 = p.sigma1 * p.sigma1 + 1.0
    v2 = p.sigma2 * p.sigma2 + 1.0
    a = lw1 - 0.5 * (LOG_2PI + math.log(v1) + (t - p.theta1) ** 2 / v1)
    b = lw2 - 0.5 * (LOG_2PI + math.log(v2) + (t - p.theta2) ** 2 / v2)
    return np.stack([a, b])


def prior_density(mu, p: FamilyParams):
    """Mixture density of the latent performance ``mu``."""
    for w, _, s in p.components():
        if w > 0 and s == 0:
            raise DegeneratePriorError(
                "prior has a point-mass component; use marginal_density for t-stat densities")
    mu = np.asarray(mu, dtype=float)
    out = np.zeros_like(mu)
    for w, th, s in p.components():
        if w > 0:
            out = out + w * np.exp(-0.5 * ((mu - th) / s) ** 2) / (s * math.sqrt(2 * math.pi))
    return out


def marginal_density(t, p: FamilyParams):
    """Density of the observed t-stat: the prior convolved with N(0, 1)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for w, th, s in p.components():
        v = s * s + 1.0
        out = out + w * np.exp(-0.5 * (t - th) ** 2 / v) / math.sqrt(2 * math.pi * v)
    return out


def log_marginal(t, p: FamilyParams):
    """Elementwise log marginal density, floored at ``log(1e-300)``."""
    return np.maximum(np.logaddexp(*component_log_marginals(t, p)), LOG_DENSITY_FLOOR)


def _loglik(t, theta1, sigma1, theta2, sigma2, lam) -> float:
    # hot path for the optimizer: no validation
    v1 = sigma1 * sigma1 + 1.0
    v2 = sigma2 * sigma2 + 1.0
    lw1 = math.log(lam) if lam > 0 else -math.inf
    lw2 = math.log1p(-lam) if lam < 1 else -math.inf
    a = lw1 - 0.5 * (LOG_2PI + math.log(v1) + (t - theta1) ** 2 / v1)
    b = lw2 - 0.5 * (LOG_2PI + math.log(v2) + (t - theta2) ** 2 / v2)
    return float(np.maximum(np.logaddexp(a, b), LOG_DENSITY_FLOOR).sum())


def log_likelihood(tstats, p: FamilyParams) -> float:
    """Sum of log marginal densities over a cross-section of t-stats."""
    t = np.asarray(tstats, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("log_likelihood needs at least one t-stat")
    if not np.all(np.isfinite(t)):
        raise ValueError("t-stats must be finite")
    return _loglik(t, p.theta1, p.sigma1, p.theta2, p.sigma2, p.lam)


def sample_mu(p: FamilyParams, n: int, seed=0) -> np.ndarray:
    """``n`` i.i.d. draws of mu from the prior."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = substream(seed, "mu")
    first = rng.random(n) < p.lam
    z = rng.standard_normal(n)
    return np.where(first, p.theta1 + p.sigma1 * z, p.theta2 + p.sigma2 * z)
