"""PnL analytics: reduced Hamiltonians, drift/martingale split, distribution
features and paired MO-vs-RL dominance tests.

PnL samples are wealth increments (gains); risk is evaluated on losses ``-PnL``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from ._validation import as_vector, check_paired, check_probability_level
from .exceptions import ConfigurationError
from .ledger import CashRates, HoldingCostModel
from .mo import SeparableGain
from .risk import cvar_ru, gaussian_tail_proxy, positivity_bounds
from .sde import SdeModel

__all__ = [
    "ReducedHamiltonianInput",
    "PerturbationSpec",
    "PnlDistribution",
    "SplitReport",
    "DominanceReport",
    "reduced_hamiltonian",
    "kappa_correction",
    "semimartingale_split",
    "distribution_features",
    "dominance_report",
    "hamiltonian_action_gradient",
]

MIN_PATHS = 100


@dataclass
class ReducedHamiltonianInput:
    """Inputs of the mode-specific cash-gain kernel at one decision time.

    Taker mode uses ``liq_price``, ``exec_price`` and ``speed``; maker mode uses
    the quote prices ``bid``/``ask`` and fill intensities.
    """

    mode: str
    position: np.ndarray
    drift: np.ndarray
    sigma: np.ndarray
    kappa: float = 0.0
    liq_price: np.ndarray | None = None
    exec_price: np.ndarray | None = None
    speed: np.ndarray | None = None
    bid: np.ndarray | None = None
    ask: np.ndarray | None = None
    intensity_bid: np.ndarray | None = None
    intensity_ask: np.ndarray | None = None
    mid: np.ndarray | None = None
    cash: float = 0.0
    rates: CashRates = field(default_factory=CashRates)
    holding_cost: HoldingCostModel = field(default_factory=HoldingCostModel)

    def __post_init__(self):
        if self.mode not in ("taker", "maker"):
            raise ConfigurationError("mode must be 'taker' or 'maker'")
        self.position = as_vector(self.position, name="position")
        n = self.position.size
        self.drift = as_vector(self.drift, n, "drift")
        self.sigma = np.atleast_2d(np.asarray(self.sigma, float))
        if self.sigma.shape[0] != n:
            raise ConfigurationError(f"sigma must have {n} rows")
        if not np.isfinite(self.kappa):
            raise ConfigurationError("kappa must be finite")
        need = ("liq_price", "exec_price", "speed") if self.mode == "taker" else (
            "liq_price", "bid", "ask", "intensity_bid", "intensity_ask")
        for name in need:
            if getattr(self, name) is None:
                raise ConfigurationError(f"{self.mode} mode needs {name}")
            setattr(self, name, as_vector(getattr(self, name), n, name))
        if self.mid is None:
            self.mid = self.liq_price
        self.mid = as_vector(self.mid, n, "mid")

    @property
    def exposure(self) -> np.ndarray:
        return self.sigma.T @ self.position


def reduced_hamiltonian(inp: ReducedHamiltonianInput) -> float:
    """Cash-gain kernel evaluated term by term."""
    g = inp.position @ inp.drift + 0.5 * inp.kappa
    g += -float(inp.holding_cost(inp.position, inp.cash)) + float(inp.rates.carry(inp.cash))
    if inp.mode == "taker":
        g += (inp.liq_price - inp.exec_price) @ inp.speed
        g -= inp.rates.tax * inp.mid @ np.abs(inp.speed)
    else:
        g += (inp.liq_price - inp.bid) @ inp.intensity_bid - (inp.liq_price - inp.ask) @ inp.intensity_ask
        g -= inp.rates.tax * inp.mid @ (inp.intensity_bid + inp.intensity_ask)
    return float(g)


def kappa_correction(exposure: Callable, model: SdeModel, t: float, y, rel_step: float = 1e-6) -> float:
    """``Tr(D_y u V R)`` with ``D_y u`` by central differences of the exposure map ``u(t, y)``."""
    y = as_vector(y, model.dim_state, "state")
    u0 = np.atleast_1d(np.asarray(exposure(t, y), float))
    Du = np.empty((u0.size, y.size))
    for j in range(y.size):
        h = rel_step * (1.0 + abs(y[j]))
        e = np.zeros_like(y)
        e[j] = h
        Du[:, j] = (np.atleast_1d(exposure(t, y + e)) - np.atleast_1d(exposure(t, y - e))) / (2 * h)
    V = np.asarray(model.diffusion(t, y), float).reshape(model.dim_state, model.dim_noise)
    return float(np.trace(Du @ V @ model.correlation))


# ---------------------------------------------------------------------------
# Semimartingale split
# ---------------------------------------------------------------------------


@dataclass
class SplitReport:
    drift_part: np.ndarray
    martingale_part: np.ndarray
    compensated_part: np.ndarray | None

    @staticmethod
    def _mean_se(x):
        x = np.asarray(x, float)
        return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))

    @property
    def drift_mean(self):
        return self._mean_se(self.drift_part)

    @property
    def martingale_mean(self):
        return self._mean_se(self.martingale_part)

    @property
    def compensated_mean(self):
        return None if self.compensated_part is None else self._mean_se(self.compensated_part)


def semimartingale_split(increments, g_values, dt: float, fills: dict | None = None) -> SplitReport:
    """Split per-step PnL increments ``(n_paths, n_steps)`` into ``int g ds`` and the rest.

    ``fills`` (maker mode) holds arrays ``n_bid, n_ask, intensity_bid,
    intensity_ask, capture_bid, capture_ask`` with ``capture = P_liq - quote``;
    the compensated fill part is ``capture_bid (dN_bid - lam dt) - capture_ask (dN_ask - lam dt)``
    summed over steps and assets.
    """
    inc = np.atleast_2d(np.asarray(increments, float))
    g = np.broadcast_to(np.asarray(g_values, float), inc.shape)
    drift = (g * dt).sum(axis=1)
    mart = inc.sum(axis=1) - drift
    comp = None
    if fills is not None:
        f = {k: np.asarray(v, float) for k, v in fills.items()}
        jb = f["n_bid"] - f["intensity_bid"] * dt
        ja = f["n_ask"] - f["intensity_ask"] * dt
        term = f["capture_bid"] * jb - f["capture_ask"] * ja
        comp = term.reshape(term.shape[0], -1).sum(axis=1)
    return SplitReport(drift, mart, comp)


# ---------------------------------------------------------------------------
# Distribution features
# ---------------------------------------------------------------------------


@dataclass
class PnlDistribution:
    """Empirical features with bootstrap percentile intervals."""

    mean: float
    variance: float
    cvar_loss: float
    p_positive: float
    mean_ci: tuple
    variance_ci: tuple
    cvar_ci: tuple
    p_positive_ci: tuple
    n_paths: int
    alpha: float
    gaussian_value_at_risk: float
    gaussian_cvar: float
    cantelli_lower: float
    cantelli_upper: float


def _features(x, alpha):
    return x.mean(), x.var(ddof=1) if x.size > 1 else 0.0, cvar_ru(-x, alpha), float(np.mean(x >= 0))


def distribution_features(samples, alpha: float = 0.95, mode: str = "taker", n_boot: int = 200,
                          seed: int = 0, ci_level: float = 0.95) -> PnlDistribution:
    """Mean, variance, CVaR of the loss and ``P[PnL >= 0]`` with bootstrap CIs.

    ``mode`` is informational; the same estimators serve both books.
    """
    alpha = check_probability_level(alpha)
    x = np.asarray(samples, float).ravel()
    if x.size < MIN_PATHS:
        raise ConfigurationError(f"need at least {MIN_PATHS} paths, got {x.size}")
    if mode not in ("taker", "maker"):
        raise ConfigurationError("mode must be 'taker' or 'maker'")
    m, v, c, p = _features(x, alpha)
    rng = np.random.default_rng(seed)
    boots = np.array([_features(x[rng.integers(0, x.size, x.size)], alpha) for _ in range(n_boot)])
    q = [(1 - ci_level) / 2, 1 - (1 - ci_level) / 2]
    cis = [tuple(map(float, np.quantile(boots[:, j], q))) for j in range(4)]
    sd = np.sqrt(v)
    gvar, gcvar = gaussian_tail_proxy(-m, sd, alpha)
    pb = positivity_bounds(m, sd)
    return PnlDistribution(float(m), float(v), float(c), p, *cis, x.size, alpha,
                           gaussian_value_at_risk=gvar, gaussian_cvar=gcvar,
                           cantelli_lower=pb.lower, cantelli_upper=pb.upper)


# ---------------------------------------------------------------------------
# Perturbations and dominance
# ---------------------------------------------------------------------------


@dataclass
class PerturbationSpec:
    """Mean-zero perturbation ``eps`` with ``E||eps||^2 = floor`` and an optional smoothing lag.

    ``law`` is ``"gaussian"`` or ``"rademacher"``; variance is split evenly over
    the ``dim`` coordinates.  With ``lag_steps > 1`` the perturbation is a
    normalized moving sum of iid draws, which keeps the per-step variance.
    """

    floor: float
    dim: int = 1
    law: str = "gaussian"
    lag_steps: int = 1

    def __post_init__(self):
        if self.floor < 0:
            raise ConfigurationError("floor must be >= 0")
        if self.law not in ("gaussian", "rademacher"):
            raise ConfigurationError("law must be 'gaussian' or 'rademacher'")
        if self.lag_steps < 1:
            raise ConfigurationError("lag_steps must be >= 1")

    def sample(self, rng: np.random.Generator, n_paths: int, n_steps: int) -> np.ndarray:
        """Draws of shape ``(n_paths, n_steps, dim)``."""
        shape = (n_paths, n_steps + self.lag_steps - 1, self.dim)
        if self.law == "gaussian":
            z = rng.standard_normal(shape)
        else:
            z = rng.integers(0, 2, shape) * 2.0 - 1.0
        if self.lag_steps > 1:
            c = np.cumsum(z, axis=1)
            c = np.concatenate([np.zeros((n_paths, 1, self.dim)), c], axis=1)
            z = (c[:, self.lag_steps:] - c[:, :-self.lag_steps]) / np.sqrt(self.lag_steps)
        return z * np.sqrt(self.floor / self.dim)


@dataclass
class DominanceReport:
    mean_gap: float
    var_gap: float
    cvar_gap: float
    ppos_gap: float
    p_values: dict
    flags: dict
    predicted_mean_gap: float
    proxy: dict
    n_paths: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _one_sided_t(diff) -> float:
    """p-value of ``H0: E[diff] <= 0`` against ``> 0``."""
    d = np.asarray(diff, float)
    se = d.std(ddof=1) / np.sqrt(d.size)
    if se == 0:
        return 0.0 if d.mean() > 0 else 1.0
    return float(stats.t.sf(d.mean() / se, d.size - 1))


def pitman_morgan(x, y) -> float:
    """One-sided paired test of ``Var(y) > Var(x)``: correlation of ``x+y`` with ``y-x``."""
    s, d = np.asarray(x) + np.asarray(y), np.asarray(y) - np.asarray(x)
    n = s.size
    r = np.corrcoef(s, d)[0, 1]
    if not np.isfinite(r):
        return 1.0
    if abs(r) >= 1:
        return 0.0 if r > 0 else 1.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return float(stats.t.sf(t, n - 2))


def dominance_report(mo_samples, rl_samples, perturbation: PerturbationSpec | None, strong_concavity: float,
                     horizon: float = 1.0, alpha: float = 0.95, n_boot: int = 200, seed: int = 0,
                     significance: float = 0.01) -> DominanceReport:
    """Paired tests that MO beats RL on mean, variance, loss CVaR and positivity.

    Gaps are ``MO - RL`` for mean and positivity and ``RL - MO`` for variance and
    CVaR, so every gap is positive when MO dominates.  The predicted mean gap is
    ``mu * floor * horizon / 2``.
    """
    x, y = (a.ravel() for a in check_paired(mo_samples, rl_samples, "mo_samples", "rl_samples"))
    alpha = check_probability_level(alpha)
    n = x.size
    if n < MIN_PATHS:
        raise ConfigurationError(f"need at least {MIN_PATHS} paired paths")

    mean_gap = float(np.mean(x - y))
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    cx, cy = cvar_ru(-x, alpha), cvar_ru(-y, alpha)
    px, py = float(np.mean(x >= 0)), float(np.mean(y >= 0))

    p_mean = _one_sided_t(x - y)
    p_var = pitman_morgan(x, y)
    rng = np.random.default_rng(seed)
    bd = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, n)
        bd[b] = cvar_ru(-y[idx], alpha) - cvar_ru(-x[idx], alpha)
    se_c = bd.std(ddof=1)
    p_cvar = float(stats.norm.sf((cy - cx) / se_c)) if se_c > 0 else float(cy <= cx)
    p_pos = _one_sided_t((x >= 0).astype(float) - (y >= 0).astype(float))

    gx = gaussian_tail_proxy(-x.mean(), np.sqrt(vx), alpha)[1]
    gy = gaussian_tail_proxy(-y.mean(), np.sqrt(vy), alpha)[1]
    lx = positivity_bounds(x.mean(), np.sqrt(vx)).lower
    ly = positivity_bounds(y.mean(), np.sqrt(vy)).lower
    pv = {"mean": p_mean, "variance": p_var, "cvar": p_cvar, "positivity": p_pos}
    floor = 0.0 if perturbation is None else perturbation.floor
    return DominanceReport(
        mean_gap=mean_gap,
        var_gap=float(vy - vx),
        cvar_gap=float(cy - cx),
        ppos_gap=px - py,
        p_values=pv,
        flags={k: bool(v < significance) for k, v in pv.items()},
        predicted_mean_gap=0.5 * strong_concavity * floor * horizon,
        proxy={"cvar_mo": float(gx), "cvar_rl": float(gy), "cantelli_mo": float(lx), "cantelli_rl": float(ly)},
        n_paths=n,
    )


def hamiltonian_action_gradient(gain: SeparableGain, position, speed, costate=None, rel_step: float = 1e-6
                                ) -> np.ndarray:
    """Central-difference gradient in the action of ``<p, v> - <lam, |v|> - v' Xi v / 2``.

    ``p`` defaults to the myopic drive at ``position``.  At the myopic optimum
    away from kinks the gradient vanishes.
    """
    from .mo import myopic_drive

    v = as_vector(speed, gain.n_assets, "speed")
    p = myopic_drive(gain, position) if costate is None else as_vector(costate, gain.n_assets, "costate")

    def H(w):
        return p @ w - gain.l1_cost @ np.abs(w) - 0.5 * w @ gain.temp_impact @ w

    out = np.empty_like(v)
    for i in range(v.size):
        h = rel_step * (1.0 + abs(v[i]))
        e = np.zeros_like(v)
        e[i] = h
        out[i] = (H(v + e) - H(v - e)) / (2 * h)
    return out
