"""Risk measures on loss samples (larger loss is worse).

PnL enters as loss ``L = -dX`` everywhere in the lab.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import optimize, special, stats

from ._validation import check_positive, check_probability_level
from .exceptions import ConfigurationError, NumericalDomainError

__all__ = [
    "LossSample",
    "RiskSpec",
    "PositivityBounds",
    "cvar_ru",
    "cvar_bruteforce",
    "value_at_risk",
    "gaussian_tail_proxy",
    "entropic_risk",
    "expectile",
    "entropic_and_expectile",
    "bpoe",
    "positivity_bounds",
]


@dataclass(frozen=True)
class LossSample:
    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, float).ravel()
        if v.size == 0:
            raise ConfigurationError("empty loss sample")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("loss sample contains non-finite values")
        object.__setattr__(self, "values", v)
        if self.weights is not None:
            w = np.asarray(self.weights, float).ravel()
            if w.shape != v.shape or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-10):
                raise ConfigurationError("weights must be nonnegative, match values, and sum to 1")
            object.__setattr__(self, "weights", w)

    @property
    def probs(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.values.size, 1.0 / self.values.size)
        return self.weights

    def mean(self) -> float:
        return float(self.probs @ self.values)


@dataclass(frozen=True)
class RiskSpec:
    kind: str = "cvar"
    level: float = 0.95
    aversion: float = 0.0

    def __post_init__(self):
        if self.kind == "cvar" or self.kind == "expectile":
            check_probability_level(self.level, "level")
        elif self.kind == "entropic":
            check_positive(self.level, "entropic gamma")
        else:
            raise ConfigurationError(f"unknown risk kind {self.kind!r}")
        if self.aversion < 0:
            raise ConfigurationError("aversion must be >= 0")


def _as_sample(sample) -> LossSample:
    return sample if isinstance(sample, LossSample) else LossSample(np.asarray(sample, float))


def _sorted(sample: LossSample):
    order = np.argsort(sample.values, kind="stable")
    return sample.values[order], sample.probs[order]


def value_at_risk(sample, alpha: float) -> float:
    """Lower alpha-quantile: smallest ``z`` with ``P[Z <= z] >= alpha``."""
    alpha = check_probability_level(alpha)
    s = _as_sample(sample)
    z, p = _sorted(s)
    cum = np.cumsum(p)
    k = int(np.searchsorted(cum, alpha - 1e-12, side="left"))
    return float(z[min(k, z.size - 1)])


def cvar_ru(sample, alpha: float) -> float:
    """Exact CVaR of the empirical law via the minimization form.

    The minimizer is the alpha-quantile, so the tail average including its
    fractional atom is ``VaR + E[(Z - VaR)^+] / (1 - alpha)``.
    """
    s = _as_sample(sample)
    var = value_at_risk(s, alpha)
    return float(var + s.probs @ np.maximum(s.values - var, 0.0) / (1.0 - alpha))


def cvar_bruteforce(sample, alpha: float) -> float:
    """Test oracle: minimize the objective over every sample point."""
    s = _as_sample(sample)
    alpha = check_probability_level(alpha)
    cands = np.unique(s.values)
    obj = [m + s.probs @ np.maximum(s.values - m, 0.0) / (1.0 - alpha) for m in cands]
    return float(min(obj))


def gaussian_tail_proxy(mu: float, sigma: float, alpha: float) -> tuple[float, float]:
    """``(VaR, CVaR)`` of ``N(mu, sigma^2)`` losses at level alpha."""
    alpha = check_probability_level(alpha)
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    z = stats.norm.ppf(alpha)
    return float(mu + sigma * z), float(mu + sigma * stats.norm.pdf(z) / (1.0 - alpha))


def entropic_risk(sample, gamma: float) -> float:
    """``(1/gamma) log E[exp(gamma Z)]`` computed with log-sum-exp."""
    gamma = check_positive(gamma, "gamma")
    s = _as_sample(sample)
    val = special.logsumexp(gamma * s.values, b=s.probs) / gamma
    if not np.isfinite(val):
        raise NumericalDomainError("entropic risk overflowed")
    return float(val)


def expectile(sample, tau: float, tol: float = 1e-10) -> float:
    """Root of ``tau E[(Z-e)^+] = (1-tau) E[(e-Z)^+]`` by bisection on ``[min, max]``."""
    tau = check_probability_level(tau, "tau")
    s = _as_sample(sample)
    lo, hi = float(s.values.min()), float(s.values.max())
    if lo == hi:
        return lo

    def f(e):
        return tau * (s.probs @ np.maximum(s.values - e, 0.0)) - (1 - tau) * (s.probs @ np.maximum(e - s.values, 0.0))

    return float(optimize.bisect(f, lo, hi, xtol=tol * max(1.0, hi - lo), maxiter=500))


def entropic_and_expectile(sample, spec: RiskSpec) -> float:
    if spec.kind == "entropic":
        return entropic_risk(sample, spec.level)
    if spec.kind == "expectile":
        return expectile(sample, spec.level)
    if spec.kind == "cvar":
        return cvar_ru(sample, spec.level)
    raise ConfigurationError(f"unknown risk kind {spec.kind!r}")


def bpoe(sample, threshold: float, tol: float = 1e-13) -> float:
    """Buffered probability of exceedance ``1 - sup{alpha : CVaR_alpha <= threshold}``.

    Returns 0 when the threshold is at or above the sample maximum and 1 when
    it is below the mean (no level satisfies the constraint).
    """
    s = _as_sample(sample)
    mx = float(s.values.max())
    if threshold >= mx:
        return 0.0
    mean = s.mean()
    if threshold < mean:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        c = mean if mid == 0.0 else cvar_ru(s, mid)
        if c <= threshold:
            lo = mid
        else:
            hi = mid
    return float(1.0 - lo)


class PositivityBounds(NamedTuple):
    lower: float
    upper: float
    empirical: float | None
    chernoff: float | None


def positivity_bounds(mu: float, sigma: float, sample=None, chernoff: bool = False,
                      theta_grid: np.ndarray | None = None) -> PositivityBounds:
    """Cantelli bracket for ``P[X >= 0]`` from mean and standard deviation.

    ``chernoff`` adds ``inf_theta E[exp(-theta X)]``, an upper bound on
    ``P[X <= 0]`` from the empirical moment generating function.
    """
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    if mu == 0 and sigma == 0:
        lower = upper = 1.0
    else:
        mp, mn = max(mu, 0.0), min(mu, 0.0)
        lower = 1.0 - sigma**2 / (sigma**2 + mp**2) if (sigma > 0 or mp > 0) else 0.0
        upper = sigma**2 / (sigma**2 + mn**2) if (sigma > 0 or mn < 0) else 1.0
    emp = None
    cb = None
    if sample is not None:
        x = np.asarray(sample, float).ravel()
        emp = float(np.mean(x >= 0))
        if chernoff:
            sd = x.std() or 1.0
            grid = np.linspace(0.0, 10.0 / sd, 401) if theta_grid is None else np.asarray(theta_grid, float)
            log_mgf = special.logsumexp(-np.outer(grid, x), axis=1) - np.log(x.size)
            cb = float(min(1.0, np.exp(log_mgf.min())))
    return PositivityBounds(float(lower), float(upper), emp, cb)
