"""Phantom-profit audit for anticipative controls.

The audit market is an arithmetic Brownian price ``dP = l dt + sigma dB`` with
``dB = dW + alpha dt``: ``W`` is the causal noise and ``alpha`` an information
drift seen only by an enlarged filtration.  Positions are re-set at the start
of each bar and held for the bar; a look-ahead leak adds
``c (W_{s+window} - W_s)`` to the position of the bar starting at ``s``.

Phantom profit is the mean backtest gain minus the causal baseline
``E[int <phi, l> dt]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special, stats

from ._validation import as_vector, check_positive
from .exceptions import ConfigurationError
from .rl import TrainTrace
from .sde import brownian_increments

__all__ = [
    "LeakageSpec",
    "MarketScenario",
    "PhantomReport",
    "DecompositionReport",
    "SolutionBiasReport",
    "LookaheadTrainingEnv",
    "normal_proxy_probability",
    "z_effective",
    "lugannani_rice",
    "positive_bias_prob",
    "bar_positions",
    "phantom_profit",
    "decompose_phantom",
    "slope_vs_window",
    "solution_bias",
]


@dataclass(frozen=True)
class LeakageSpec:
    """One leakage channel: ``none``, ``lookahead`` or ``info_drift``.

    ``window_steps`` and ``gain`` parametrize the look-ahead; ``alpha`` is a
    constant information drift.  ``lag=True`` turns the look-ahead window into
    a look-back window, an adapted control used as a negative control.
    """

    kind: str = "none"
    window_steps: int = 0
    gain: float = 0.0
    alpha: float = 0.0
    lag: bool = False
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("none", "lookahead", "info_drift"):
            raise ConfigurationError(f"unknown leakage kind {self.kind!r}")
        if self.window_steps < 0:
            raise ConfigurationError("window_steps must be >= 0")
        if self.kind != "lookahead" and (self.window_steps or self.gain):
            raise ConfigurationError("window/gain only apply to look-ahead leakage")
        if self.kind != "info_drift" and self.alpha:
            raise ConfigurationError("alpha only applies to info-drift leakage")


@dataclass(frozen=True)
class MarketScenario:
    drift: float = 0.05
    sigma: float = 1.0
    horizon: float = 1.0
    n_steps: int = 256
    bar_steps: int = 32
    quad_cost: float = 1.0

    def __post_init__(self):
        check_positive(self.sigma, "sigma")
        check_positive(self.horizon, "horizon")
        if self.n_steps < 1 or self.bar_steps < 1 or self.n_steps % self.bar_steps:
            raise ConfigurationError("n_steps must be a positive multiple of bar_steps")

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_bars(self) -> int:
        return self.n_steps // self.bar_steps


# ---------------------------------------------------------------------------
# Positions and profit
# ---------------------------------------------------------------------------


def _window_increments(dW: np.ndarray, scenario: MarketScenario, window: int, lag: bool) -> np.ndarray:
    """Per-bar window increment of ``W``: ``(n, n_bars)``."""
    if window > scenario.bar_steps and not lag:
        raise ConfigurationError("look-ahead window longer than a bar")
    n = dW.shape[0]
    W = np.concatenate([np.zeros((n, 1)), np.cumsum(dW, axis=1)], axis=1)
    starts = np.arange(scenario.n_bars) * scenario.bar_steps
    if lag:
        return W[:, starts] - W[:, np.maximum(starts - window, 0)]
    return W[:, starts + window] - W[:, starts]


def bar_positions(base, leak: LeakageSpec, dW: np.ndarray, scenario: MarketScenario) -> np.ndarray:
    """Per-step positions ``(n, n_steps)``: ``base`` plus the leak's window term.

    ``base`` is a constant or a callable ``base(dW, scenario) -> (n, n_steps)``
    that must only use past increments.
    """
    n = dW.shape[0]
    if callable(base):
        phi = np.asarray(base(dW, scenario), float)
    else:
        phi = np.full((n, scenario.n_steps), float(base))
    if leak.kind == "lookahead" and leak.gain:
        X = _window_increments(dW, scenario, leak.window_steps, leak.lag)
        phi = phi + leak.gain * np.repeat(X, scenario.bar_steps, axis=1)
    return phi


def _simulate_dW(scenario: MarketScenario, n_paths: int, seed: int, offset: int = 0) -> np.ndarray:
    idx = np.arange(offset, offset + n_paths)
    return brownian_increments(seed, idx, scenario.n_steps, 1, scenario.step)[..., 0]


@dataclass
class PhantomReport:
    pi_ph: float
    se: float
    ci: tuple
    info_premium: float
    info_premium_se: float
    skorokhod: float
    skorokhod_se: float
    baseline: float
    info_premium_analytic: float
    info_bound: float
    n_paths: int
    per_path: np.ndarray = field(repr=False, default=None)


def _mean_se(x):
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def _report_from_paths(phi, dW, scenario: MarketScenario, alpha: float) -> PhantomReport:
    h = scenario.step
    s = scenario.sigma
    dP = scenario.drift * h + s * (dW + alpha * h)
    gain = (phi * dP).sum(axis=1)
    base = (phi * scenario.drift * h).sum(axis=1)
    pi = gain - base
    info = (phi * s * alpha * h).sum(axis=1)
    sk = pi - info
    m, se = _mean_se(pi)
    im, ise = _mean_se(info)
    sm, sse = _mean_se(sk)
    # Cauchy-Schwarz for the information channel: |E int <phi, s a> dt| <= E int |s phi| |a| dt
    bound = float(np.mean((np.abs(s * phi) * abs(alpha) * h).sum(axis=1)))
    return PhantomReport(m, se, (m - 1.96 * se, m + 1.96 * se), im, ise, sm, sse, float(base.mean()),
                         info_premium_analytic=float(np.mean(info)), info_bound=bound,
                         n_paths=phi.shape[0], per_path=pi)


def phantom_profit(base, leakage: LeakageSpec | tuple, scenario: MarketScenario, n_paths: int,
                   seed: int, path_offset: int = 0) -> PhantomReport:
    """Phantom profit of ``base`` plus leakage, with information/Skorokhod split.

    ``leakage`` may be a pair ``(look-ahead spec, info-drift spec)`` to switch
    both channels on.  The information premium is the path average of
    ``int <phi, sigma alpha> dt``; the Skorokhod part is the remainder.
    """
    leaks = leakage if isinstance(leakage, tuple) else (leakage,)
    dW = _simulate_dW(scenario, n_paths, seed, path_offset)
    phi = bar_positions(base, LeakageSpec(), dW, scenario)
    alpha = 0.0
    for lk in leaks:
        if lk.kind == "lookahead":
            phi = phi + bar_positions(0.0, lk, dW, scenario)
        elif lk.kind == "info_drift":
            alpha += lk.alpha
    return _report_from_paths(phi, dW, scenario, alpha)


@dataclass
class DecompositionReport:
    cells: dict
    info_premium: float
    skorokhod: float
    total: float
    residual: float
    residual_ci: tuple

    def additive(self) -> bool:
        lo, hi = self.residual_ci
        return lo <= 0.0 <= hi


def decompose_phantom(base, lookahead: LeakageSpec, info: LeakageSpec, scenario: MarketScenario,
                      n_paths: int, seed: int) -> DecompositionReport:
    """2x2 design over the two channels on common random numbers.

    The residual ``both - info_only - lookahead_only + none`` is computed path
    by path; its 95% CI should cover zero when the channels add up.
    """
    if lookahead.kind != "lookahead" or info.kind != "info_drift":
        raise ConfigurationError("need a look-ahead spec and an info-drift spec")
    none = LeakageSpec()
    cells = {
        "none": phantom_profit(base, none, scenario, n_paths, seed),
        "info_only": phantom_profit(base, info, scenario, n_paths, seed),
        "lookahead_only": phantom_profit(base, lookahead, scenario, n_paths, seed),
        "both": phantom_profit(base, (lookahead, info), scenario, n_paths, seed),
    }
    res = cells["both"].per_path - cells["info_only"].per_path - cells["lookahead_only"].per_path \
        + cells["none"].per_path
    m, se = _mean_se(res)
    return DecompositionReport(
        cells=cells,
        info_premium=cells["info_only"].info_premium,
        skorokhod=cells["lookahead_only"].skorokhod,
        total=cells["both"].pi_ph,
        residual=m,
        residual_ci=(m - 1.96 * se, m + 1.96 * se),
    )


def slope_vs_window(base, windows, gain: float, scenario: MarketScenario, n_paths: int, seed: int):
    """Phantom profit across look-ahead windows (in steps) and its linear fit.

    Returns ``(windows_in_time, pi, se, slope, intercept, r2)``.
    """
    w = np.asarray(windows, int)
    pis, ses = [], []
    for k in w:
        r = phantom_profit(base, LeakageSpec("lookahead", int(k), gain), scenario, n_paths, seed)
        pis.append(r.pi_ph)
        ses.append(r.se)
    x = w * scenario.step
    fit = stats.linregress(x, pis)
    return x, np.array(pis), np.array(ses), float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


# ---------------------------------------------------------------------------
# Training with a look-ahead feature
# ---------------------------------------------------------------------------


@dataclass
class LookaheadTrainingEnv:
    """Two-parameter policy ``phi = theta_base + theta_look * (W_{s+window} - W_s)`` on bars.

    The causal objective ``J(theta) = E[sum phi dP_causal - q/2 int phi^2 dt]``
    has an analytic gradient; the backtest gradient adds the look-ahead
    contamination ``b``, estimated by Monte Carlo on ``batch`` paths.
    """

    scenario: MarketScenario
    window_steps: int
    dim: int = 2

    def _coef(self):
        sc = self.scenario
        T, q, wt = sc.horizon, sc.quad_cost, self.window_steps * sc.step
        return T, q, wt

    def objective(self, theta):
        th = np.asarray(theta, float)
        T, q, wt = self._coef()
        return th[..., 0] * self.scenario.drift * T - 0.5 * q * T * (th[..., 0] ** 2 + th[..., 1] ** 2 * wt)

    def gradient(self, theta):
        th = np.asarray(theta, float)
        T, q, wt = self._coef()
        return np.stack([self.scenario.drift * T - q * T * th[..., 0], -q * T * wt * th[..., 1]], axis=-1)

    def gap(self, theta):
        T, q, _ = self._coef()
        star = np.array([self.scenario.drift / q, 0.0])
        return self.objective(star) - self.objective(theta)

    def sample_gradient(self, theta, rng, batch: int = 1):
        return self.gradient(theta)

    def contamination_exact(self) -> np.ndarray:
        sc = self.scenario
        return np.array([0.0, sc.n_bars * sc.sigma * self.window_steps * sc.step])

    def contaminated_gradient(self, theta, rng: np.random.Generator, batch: int):
        th = np.atleast_2d(np.asarray(theta, float))
        sc = self.scenario
        R = th.shape[0]
        dW = rng.standard_normal((R * batch, sc.n_steps)) * np.sqrt(sc.step)
        X = _window_increments(dW, sc, self.window_steps, False)
        bar_moves = dW.reshape(R * batch, sc.n_bars, sc.bar_steps).sum(axis=2)
        d_look = (sc.sigma * X * bar_moves).sum(axis=1).reshape(R, batch).mean(axis=1)
        b = np.stack([np.zeros(R), d_look], axis=-1)
        return self.gradient(th).reshape(R, 2), b


# ---------------------------------------------------------------------------
# Solution bias and its sign probability
# ---------------------------------------------------------------------------


def normal_proxy_probability(z_eff) -> np.ndarray | float:
    """``Phi(z_eff)``."""
    return stats.norm.cdf(z_eff)


def z_effective(Z, Delta) -> float:
    Z = np.asarray(Z, float).ravel()
    D = np.asarray(Delta, float).ravel()
    if Z.size != D.size or Z.size < 2:
        raise ConfigurationError("need paired samples of Z and Delta")
    c = np.cov(Z, D, ddof=1)
    var = c[0, 0] + c[1, 1] + 2 * c[0, 1]
    if var <= 0:
        raise ConfigurationError("degenerate Z + Delta")
    return float((Z.mean() + D.mean()) / np.sqrt(var))


def lugannani_rice(cgf: Callable, threshold: float, bracket=(-50.0, 50.0), tail: str = "upper") -> float:
    """Saddlepoint tail ``P[Z > threshold]`` from a cgf returning ``(K, K', K'', K''')``.

    Near the mean (``omega ~ 0``) the limit ``1/2 - K'''(0) / (6 sqrt(2 pi) K''(0)^{3/2})``
    is used.
    """
    K0, K1_0, K2_0, K3_0 = cgf(0.0)
    x = float(threshold)
    scale = np.sqrt(K2_0)
    if abs(x - K1_0) < 1e-7 * max(scale, 1e-300):
        p = 0.5 - K3_0 / (6.0 * np.sqrt(2 * np.pi) * K2_0**1.5)
        return float(p if tail == "upper" else 1 - p)
    t_hat = optimize.brentq(lambda t: cgf(t)[1] - x, bracket[0], bracket[1], xtol=1e-14, rtol=1e-14,
                            maxiter=500)
    K, _, K2, _ = cgf(t_hat)
    w2 = 2.0 * (t_hat * x - K)
    omega = np.sign(t_hat) * np.sqrt(max(w2, 0.0))
    u = t_hat * np.sqrt(K2)
    p = stats.norm.sf(omega) + stats.norm.pdf(omega) * (1.0 / u - 1.0 / omega)
    p = float(np.clip(p, 0.0, 1.0))
    return p if tail == "upper" else 1.0 - p


def _gaussian_cgf(m, v):
    return lambda t: (m * t + 0.5 * v * t * t, m + v * t, v, 0.0)


def _empirical_cgf(z):
    z = np.asarray(z, float)

    def cgf(t):
        a = t * z
        w = np.exp(a - a.max())
        w /= w.sum()
        m1 = w @ z
        c = z - m1
        m2 = w @ c**2
        m3 = w @ c**3
        K = special.logsumexp(a) - np.log(z.size)
        return K, m1, m2, m3

    return cgf


def _empirical_bracket(z, x=None, scale=30.0, max_doublings=40):
    """Symmetric bracket in ``t``, widened until ``K'`` spans ``x``."""
    sd = np.std(z) or 1.0
    half = scale / sd
    if x is None:
        return (-half, half)
    cgf = _empirical_cgf(z)
    for _ in range(max_doublings):
        if cgf(-half)[1] < x < cgf(half)[1]:
            break
        half *= 2.0
    return (-half, half)


def positive_bias_prob(Z, Delta, method: str = "normal_proxy", cgf: str = "empirical",
                       n_bins: int = 20, n_nodes: int = 96) -> float:
    """``P[Z + Delta > 0]`` by the normal proxy or the Lugannani-Rice kernel.

    ``lr_kernel`` conditions on ``Delta``: with ``cgf="empirical"`` it uses
    equal-mass bins of ``Delta`` and the empirical cgf of ``Z`` in each bin; with
    ``cgf="gaussian"`` it uses the conditional Gaussian cgf and integrates
    ``Delta`` by Gauss-Hermite quadrature.  A failed saddlepoint solve falls back
    to the normal proxy with a warning.
    """
    Z = np.asarray(Z, float).ravel()
    D = np.asarray(Delta, float).ravel()
    if Z.size == 0 or Z.size != D.size:
        raise ConfigurationError("need nonempty paired samples")
    z_eff = z_effective(Z, D)
    if method == "normal_proxy":
        return float(normal_proxy_probability(z_eff))
    if method != "lr_kernel":
        raise ConfigurationError(f"unknown method {method!r}")
    try:
        if cgf == "gaussian":
            c = np.cov(Z, D, ddof=1)
            mz, md = Z.mean(), D.mean()
            beta = c[0, 1] / c[1, 1] if c[1, 1] > 0 else 0.0
            vz = c[0, 0] - beta * c[0, 1]
            nodes, weights = special.roots_hermitenorm(n_nodes)
            weights = weights / weights.sum()
            total = 0.0
            for x, w in zip(nodes, weights):
                delta = md + np.sqrt(c[1, 1]) * x
                m_cond = mz + beta * (delta - md)
                s = np.sqrt(vz)
                total += w * lugannani_rice(_gaussian_cgf(m_cond, vz), -delta, bracket=(-60 / s, 60 / s))
            return float(total)
        if cgf != "empirical":
            raise ConfigurationError("cgf must be 'empirical' or 'gaussian'")
        order = np.argsort(D, kind="stable")
        bins = np.array_split(order, min(n_bins, D.size))
        probs = []
        for b in bins:
            zb = Z[b]
            if zb.size < 2 or np.std(zb) == 0:
                probs.append(float(np.mean(zb + D[b] > 0)))
                continue
            x = -float(D[b].mean())
            # The empirical cgf has K' confined to (min z, max z); outside it the tail is 0 or 1.
            if x <= zb.min() or x >= zb.max():
                probs.append(float(np.mean(zb > x)))
                continue
            probs.append(lugannani_rice(_empirical_cgf(zb), x, bracket=_empirical_bracket(zb, x)))
        return float(np.average(probs, weights=[b.size for b in bins]))
    except ValueError as exc:
        warnings.warn(f"saddlepoint solve failed ({exc}); using the normal proxy", RuntimeWarning)
        return float(normal_proxy_probability(z_eff))


@dataclass
class SolutionBiasReport:
    b_sol: np.ndarray
    info_premium: float
    skorokhod: float
    Z: np.ndarray
    M: np.ndarray
    delta: np.ndarray
    z_eff: float
    p_positive_normal: float
    p_positive_lr: float

    @property
    def mean_b_sol(self) -> float:
        return float(np.mean(self.b_sol))


def solution_bias(impl: TrainTrace, naive: TrainTrace, cost_gradient: Callable | np.ndarray,
                  wealth: Callable | None = None, phantom: PhantomReport | None = None) -> SolutionBiasReport:
    """Solution bias between an implemented (contaminated) and a clean training run, per replica.

    ``cost_gradient`` is the weight vector ``C`` or a callable of the two
    final parameter vectors (e.g. the objective gradient at their midpoint).
    ``wealth(theta)`` gives the expected causal wealth of a policy; when
    omitted the bias is the linearization ``<C, theta_impl - theta_naive>``.
    """
    Ki, Kn = impl.completed, naive.completed
    if impl.theta.shape[1:] != naive.theta.shape[1:]:
        raise ConfigurationError("traces have different replica/parameter shapes")
    if not np.array_equal(impl.theta[0], naive.theta[0]):
        raise ConfigurationError("traces start from different parameters")
    th_i, th_n = impl.theta[Ki], naive.theta[Kn]
    C = cost_gradient(th_i, th_n) if callable(cost_gradient) else np.broadcast_to(
        np.asarray(cost_gradient, float), th_i.shape)
    steps_i = impl.steps[:Ki, None]
    steps_n = naive.steps[:Kn, None]
    Z = (steps_i * np.einsum("krp,rp->kr", impl.bias[:Ki], C)).sum(axis=0)
    M = (steps_i * np.einsum("krp,rp->kr", impl.grad_naive[:Ki], C)).sum(axis=0) \
        - (steps_n * np.einsum("krp,rp->kr", naive.grad_naive[:Kn], C)).sum(axis=0)
    if wealth is not None:
        b_sol = np.asarray(wealth(th_i), float) - np.asarray(wealth(th_n), float)
    else:
        b_sol = np.einsum("rp,rp->r", C, th_i - th_n)
    info = phantom.info_premium if phantom is not None else 0.0
    sk = phantom.skorokhod if phantom is not None else 0.0
    delta = M + info + sk
    if Z.size > 1 and np.var(Z + delta) > 0:
        z_eff = z_effective(Z, delta)
        p_n = positive_bias_prob(Z, delta, "normal_proxy")
        p_lr = positive_bias_prob(Z, delta, "lr_kernel", n_bins=min(20, Z.size // 2 or 1))
    else:
        z_eff, p_n, p_lr = float("nan"), float("nan"), float("nan")
    return SolutionBiasReport(b_sol, info, sk, Z, M, delta, z_eff, p_n, p_lr)
