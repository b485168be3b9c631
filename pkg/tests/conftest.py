import numpy as np
from scipy import stats as sps

from ebmine.prior import FamilyParams


def marginal_cdf(t, p: FamilyParams):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for w, th, s in p.components():
        out = out + w * sps.norm.cdf((t - th) / np.sqrt(s * s + 1.0))
    return out


def ks_marginal(p: FamilyParams, q: FamilyParams) -> float:
    """Sup distance between the two t-stat marginal CDFs, on a fine grid."""
    grid = np.linspace(-25, 25, 200_001)
    return float(np.max(np.abs(marginal_cdf(grid, p) - marginal_cdf(grid, q))))


def draw_t(p: FamilyParams, n: int, seed: int):
    from ebmine.prior import sample_mu
    rng = np.random.default_rng(seed)
    return sample_mu(p, n, rng) + rng.standard_normal(n)
