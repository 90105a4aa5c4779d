"""Myopic one-step controller.

The one-step problem is ``max_v <d, v> - <lam, |v|> - v' Xi v / 2`` over a
feasible speed set, where the drive ``d = mu - Q phi - grad HC(phi) - risk``
collects everything that is linear in the speed.  Its solution is a
soft-threshold: zero inside the no-trade wedge ``|d_i| <= lam_i`` and a
shrunk drive outside it.

This module also hosts the transient-impact adjoint, the Malliavin shadow
price of a terminal risk functional, the feasibility projection and the KKT
residual diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import as_matrix, as_vector, check_psd
from .exceptions import ConfigurationError, ConvergenceError
from .ledger import HoldingCostModel
from .sde import PathGrid, SdeModel, bel_weights_batch, flow_jacobians_batch, simulate_paths

__all__ = [
    "SeparableGain",
    "FeasibleSet",
    "AdjointState",
    "ShadowPrice",
    "KktMultipliers",
    "soft_threshold",
    "solve_soft_threshold",
    "myopic_drive",
    "myopic_step",
    "project_feasible",
    "kkt_residual",
    "transient_convolution",
    "volterra_adjoint",
    "gradient_kernel",
    "shadow_price",
    "MyopicController",
]


@dataclass
class SeparableGain:
    """Separable one-step gain for ``N`` assets.

    Parameters
    ----------
    drift : vector
        Expected gain per unit position per unit time.
    inventory_penalty : matrix
        PSD matrix ``Q``.
    l1_cost : vector
        Proportional cost per unit speed.
    temp_impact : matrix
        PD matrix ``Xi``.
    holding_cost : HoldingCostModel, optional
        Supplies ``grad HC`` for the drive.
    return_cov : matrix, optional
        Covariance of price changes per unit time; only used by the risk budget.
    """

    drift: np.ndarray
    inventory_penalty: np.ndarray | float = 0.0
    l1_cost: np.ndarray | float = 0.0
    temp_impact: np.ndarray | float = 1.0
    holding_cost: HoldingCostModel | None = None
    return_cov: np.ndarray | None = None

    def __post_init__(self):
        self.drift = as_vector(self.drift, name="drift")
        n = self.drift.size
        self.inventory_penalty = as_matrix(self.inventory_penalty, n, "inventory_penalty")
        self.l1_cost = as_vector(self.l1_cost, n, "l1_cost")
        self.temp_impact = as_matrix(self.temp_impact, n, "temp_impact")
        if np.any(self.l1_cost < 0):
            raise ConfigurationError("l1_cost must be >= 0")
        check_psd(self.inventory_penalty, "inventory_penalty")
        self.xi_min_eig = check_psd(self.temp_impact, "temp_impact", strict=True)
        if self.return_cov is not None:
            self.return_cov = as_matrix(self.return_cov, n, "return_cov")

    @property
    def n_assets(self) -> int:
        return self.drift.size

    def value(self, position, speed) -> np.ndarray:
        """Running gain ``<mu, phi> - phi'Q phi/2 - <lam,|v|> - v'Xi v/2 - HC``."""
        phi = np.asarray(position, float)
        v = np.asarray(speed, float)
        g = phi @ self.drift - 0.5 * np.einsum("...i,ij,...j->...", phi, self.inventory_penalty, phi)
        g = g - np.abs(v) @ self.l1_cost - 0.5 * np.einsum("...i,ij,...j->...", v, self.temp_impact, v)
        if self.holding_cost is not None:
            g = g - self.holding_cost(phi)
        return g


@dataclass
class FeasibleSet:
    """Position box, speed cap, participation cap and optional terminal / risk constraints.

    ``speed_norm`` is ``"inf"`` (componentwise cap) or ``"2"`` (Euclidean ball).
    """

    position_low: np.ndarray | float = -np.inf
    position_high: np.ndarray | float = np.inf
    speed_cap: np.ndarray | float = np.inf
    speed_norm: str = "inf"
    participation_cap: float = np.inf
    adv: np.ndarray | float = np.inf
    terminal_target: np.ndarray | None = None
    terminal_window: float = 0.0
    risk_budget: float | None = None
    risk_level: float = 0.95

    def __post_init__(self):
        lo = np.asarray(self.position_low, float)
        hi = np.asarray(self.position_high, float)
        if np.any(lo > hi):
            raise ConfigurationError("position box is inconsistent (low > high)")
        if np.any(np.asarray(self.speed_cap, float) <= 0):
            raise ConfigurationError("speed cap must be > 0")
        if not self.participation_cap > 0:
            raise ConfigurationError("participation cap must be > 0")
        if np.any(np.asarray(self.adv, float) <= 0):
            raise ConfigurationError("adv must be > 0")
        if self.speed_norm not in ("inf", "2"):
            raise ConfigurationError("speed_norm must be 'inf' or '2'")
        self.effective_box()

    def effective_box(self, shape=()) -> tuple[np.ndarray, np.ndarray]:
        """Position box intersected with the participation cap ``|phi| <= cap * ADV``."""
        with np.errstate(invalid="ignore"):
            cap = np.asarray(self.participation_cap * np.asarray(self.adv, float), float)
        cap = np.where(np.isnan(cap), np.inf, cap)
        lo = np.maximum(np.broadcast_to(np.asarray(self.position_low, float), shape), -cap)
        hi = np.minimum(np.broadcast_to(np.asarray(self.position_high, float), shape), cap)
        if np.any(lo > hi):
            raise ConfigurationError("position box and participation cap have empty intersection")
        return lo, hi


@dataclass(frozen=True)
class AdjointState:
    p: np.ndarray
    times: np.ndarray


@dataclass(frozen=True)
class ShadowPrice:
    value: np.ndarray
    se: np.ndarray
    method: str
    n_paths: int


@dataclass(frozen=True)
class KktMultipliers:
    upper: np.ndarray | float = 0.0
    lower: np.ndarray | float = 0.0
    other: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Soft-threshold solve
# ---------------------------------------------------------------------------


def soft_threshold(x, lam):
    x = np.asarray(x, float)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def _prox_residual(d, Xi, lam, v) -> float:
    """Fixed-point residual of the proximal-gradient map with unit step scaled by diag(Xi)."""
    diag = np.diag(Xi)
    grad = d - Xi @ v
    return float(np.max(np.abs(soft_threshold(v + grad / diag, lam / diag) - v)))


def solve_soft_threshold(drive, temp_impact, l1_cost, max_sweeps: int = 500, tol: float = 1e-10,
                         return_history: bool = False):
    """Maximize ``<d, v> - <lam, |v|> - v' Xi v / 2`` by cyclic coordinate prox steps.

    Exact in one sweep for diagonal ``Xi``.  Returns ``v`` (and the residual
    after each sweep when ``return_history``).
    """
    d = np.asarray(drive, float)
    Xi = np.asarray(temp_impact, float)
    lam = np.asarray(l1_cost, float)
    n = d.size
    v = np.zeros(n)
    history = []
    if np.all(np.abs(d) <= lam):
        return (v, [0.0]) if return_history else v
    diag = np.diag(Xi)
    for _ in range(max_sweeps):
        v_old = v.copy()
        for i in range(n):
            r = d[i] - Xi[i] @ v + Xi[i, i] * v[i]
            v[i] = soft_threshold(r, lam[i]) / diag[i]
        step = float(np.max(np.abs(v - v_old)))
        history.append(_prox_residual(d, Xi, lam, v))
        if step <= tol * max(1.0, float(np.max(np.abs(v)))):
            return (v, history) if return_history else v
    raise ConvergenceError("soft-threshold coordinate iteration did not converge", history[-1])


def myopic_drive(gain: SeparableGain, position, risk_price=0.0) -> np.ndarray:
    phi = as_vector(position, gain.n_assets, "position")
    d = gain.drift - gain.inventory_penalty @ phi - np.asarray(risk_price, float)
    if gain.holding_cost is not None:
        d = d - gain.holding_cost.gradient(phi)
    return d


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------


def _speed_box(feasible: FeasibleSet, position, dt: float):
    phi = np.asarray(position, float)
    lo, hi = feasible.effective_box(phi.shape)
    return (lo - phi) / dt, (hi - phi) / dt


def _dykstra_box_ball(x, lo, hi, radius, tol, max_iter=100_000):
    y = x.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_iter):
        z = np.clip(y + p, lo, hi)
        p = y + p - z
        w = z + q
        nrm = np.linalg.norm(w)
        y_new = w if nrm <= radius else w * (radius / nrm)
        q = z + q - y_new
        if np.max(np.abs(y_new - y)) <= tol and np.max(np.abs(z - y_new)) <= tol:
            return y_new
        y = y_new
    raise ConvergenceError("cyclic projection did not converge", float(np.max(np.abs(z - y))))


def project_feasible(value, feasible: FeasibleSet, kind: str = "position", position=None,
                     dt: float = 1.0, tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection onto the feasible positions or speeds.

    For ``kind="speed"`` the post-step position ``position + v * dt`` must stay
    inside the position box and participation cap, and ``v`` inside the speed
    cap.  Box-only intersections are exact clips; with a Euclidean speed ball
    the projection runs Dykstra's cyclic scheme to ``tol``.
    """
    x = np.asarray(value, float)
    if kind == "position":
        lo, hi = feasible.effective_box(x.shape)
        return np.clip(x, lo, hi)
    if kind != "speed":
        raise ConfigurationError("kind must be 'position' or 'speed'")
    phi = np.zeros_like(x) if position is None else np.asarray(position, float)
    lo, hi = _speed_box(feasible, phi, dt)
    cap = np.broadcast_to(np.asarray(feasible.speed_cap, float), x.shape)
    if feasible.speed_norm == "inf":
        lo_c, hi_c = np.maximum(lo, -cap), np.minimum(hi, cap)
        # When the box is out of reach this step, move toward it at full speed.
        lo_c = np.where(lo_c > hi_c, np.where(lo > cap, cap, -cap), lo_c)
        hi_c = np.maximum(hi_c, lo_c)
        return np.clip(x, lo_c, hi_c)
    radius = float(np.min(cap))
    if not np.isfinite(radius):
        return np.clip(x, lo, hi)
    return _dykstra_box_ball(x, lo, hi, radius, tol)


def _risk_scale(gain: SeparableGain, feasible: FeasibleSet, position, speed, dt: float) -> float:
    """Largest scale in [0, 1] whose proxy window CVaR meets the budget."""
    if feasible.risk_budget is None or gain.return_cov is None:
        return 1.0
    z = stats.norm.ppf(feasible.risk_level)
    tail = stats.norm.pdf(z) / (1.0 - feasible.risk_level)
    phi = np.asarray(position, float)

    def proxy(scale):
        v = scale * speed
        nxt = phi + v * dt
        mu_loss = -(nxt @ gain.drift) * dt + (np.abs(v) @ gain.l1_cost + 0.5 * v @ gain.temp_impact @ v) * dt
        sd = np.sqrt(max(nxt @ gain.return_cov @ nxt * dt, 0.0))
        return mu_loss + sd * tail

    if proxy(1.0) <= feasible.risk_budget:
        return 1.0
    lo, hi = 0.0, 1.0
    if proxy(0.0) > feasible.risk_budget:
        return 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if proxy(mid) <= feasible.risk_budget:
            lo = mid
        else:
            hi = mid
    return lo


def myopic_step(gain: SeparableGain, position, risk_price=0.0, feasible: FeasibleSet | None = None,
                dt: float = 1.0, extra_drive=None, max_sweeps: int = 500, tol: float = 1e-10) -> np.ndarray:
    """Optimal one-step speed for the separable gain, projected onto the feasible set.

    ``extra_drive`` is added to the drive (used for the control-affects-dynamics
    premium).  Inside the no-trade wedge the result is exactly zero.
    """
    phi = as_vector(position, gain.n_assets, "position")
    d = myopic_drive(gain, phi, risk_price)
    if extra_drive is not None:
        d = d + np.asarray(extra_drive, float)
    v = solve_soft_threshold(d, gain.temp_impact, gain.l1_cost, max_sweeps, tol)
    if feasible is not None:
        v = project_feasible(v, feasible, kind="speed", position=phi, dt=dt)
        v = v * _risk_scale(gain, feasible, phi, v, dt)
    return v


# ---------------------------------------------------------------------------
# KKT residual
# ---------------------------------------------------------------------------


def kkt_residual(gradient, x, multipliers: KktMultipliers | None = None, feasible: FeasibleSet | None = None,
                 *, box=None, l1=None, return_terms: bool = False):
    """Projected-gradient fixed-point norm plus violation and complementarity norms.

    The problem is a maximization, so the fixed point is ``x = P(x + G)``; with
    ``l1`` the soft-threshold prox is applied before the projection.  The box is
    either ``box=(lo, hi)`` or the effective position box of ``feasible``.
    """
    x = np.asarray(x, float)
    g = np.asarray(gradient, float)
    if box is not None:
        lo, hi = (np.broadcast_to(np.asarray(b, float), x.shape) for b in box)
    elif feasible is not None:
        lo, hi = feasible.effective_box(x.shape)
    else:
        lo, hi = np.full(x.shape, -np.inf), np.full(x.shape, np.inf)
    step = x + g
    if l1 is not None:
        step = soft_threshold(step, l1)
    stationarity = float(np.linalg.norm(np.clip(step, lo, hi) - x))
    up = np.where(np.isfinite(hi), x - hi, -np.inf)
    dn = np.where(np.isfinite(lo), lo - x, -np.inf)
    violation = float(np.linalg.norm(np.concatenate([np.maximum(up, 0.0), np.maximum(dn, 0.0)])))
    comp = 0.0
    if multipliers is not None:
        a = np.broadcast_to(np.asarray(multipliers.upper, float), x.shape)
        b = np.broadcast_to(np.asarray(multipliers.lower, float), x.shape)
        if np.any(a < 0) or np.any(b < 0):
            raise ConfigurationError("multipliers must be nonnegative")
        ca = np.where(a > 0, a * np.where(np.isfinite(hi), x - hi, np.inf), 0.0)
        cb = np.where(b > 0, b * np.where(np.isfinite(lo), lo - x, np.inf), 0.0)
        comp = float(np.linalg.norm(np.concatenate([ca, cb])))
        for name, (eta, c) in multipliers.other.items():
            comp += float(np.linalg.norm(np.asarray(eta, float) * np.asarray(c, float)))
    total = stationarity + violation + comp
    if return_terms:
        return {"stationarity": stationarity, "violation": violation, "complementarity": comp, "total": total}
    return total


def gradient_kernel(d_position, d_speed_plus_costate, risk_price, dt: float) -> np.ndarray:
    """Grid version of ``dG/dphi - d/dt (dG/dv + p) - risk`` with forward differences."""
    a = np.asarray(d_position, float)
    b = np.asarray(d_speed_plus_costate, float)
    db = np.zeros_like(b)
    db[:-1] = np.diff(b, axis=0) / dt
    db[-1] = db[-2] if len(b) > 1 else 0.0
    return a - db - np.asarray(risk_price, float)


# ---------------------------------------------------------------------------
# Transient impact adjoint
# ---------------------------------------------------------------------------


def _kernel_matrix(kernel, lag, n):
    K = np.asarray(kernel(lag), float)
    return K * np.eye(n) if K.ndim == 0 else K


def _window_steps(tau_fill: float, h: float) -> int:
    return int(round(tau_fill / h))


def transient_convolution(kernel, tau_fill: float, speeds, grid: PathGrid) -> np.ndarray:
    """``I_k = int_{(t_k - tau)^+}^{t_k} K(t_k - u) v_u du`` by trapezoid on grid points."""
    v = np.asarray(speeds, float)
    n_pts, N = v.shape
    h = grid.step
    L = _window_steps(tau_fill, h)
    out = np.zeros_like(v)
    for k in range(n_pts):
        j0 = max(0, k - L)
        if k == j0:
            continue
        for j in range(j0, k + 1):
            w = 0.5 * h if j in (j0, k) else h
            out[k] += w * _kernel_matrix(kernel, (k - j) * h, N) @ v[j]
    return out


def volterra_adjoint(kernel, tau_fill: float, sensitivity, grid: PathGrid) -> AdjointState:
    """Costate ``p_t = int_t^{min(t + tau, T)} K(s - t)^T dG/dI_s ds`` on grid points.

    ``p`` is the exact discrete adjoint of :func:`transient_convolution` when
    the running sum ``sum_k <dG/dI_k, I_k>`` runs over the left points
    ``k = 0..K-1``: ``sum_k <s_k, I_k> = sum_j <p_j, v_j>`` for every speed
    path.  The last grid point carries no running term, so ``p_T = 0``.
    """
    s = np.asarray(sensitivity, float)
    if s.ndim == 1:
        s = s[:, None]
    n_pts, N = s.shape
    h = grid.step
    L = _window_steps(tau_fill, h)
    p = np.zeros_like(s)
    for j in range(n_pts):
        for k in range(max(j, 1), min(n_pts - 2, j + L) + 1):
            j0 = max(0, k - L)
            w = 0.5 * h if j in (j0, k) else h
            p[j] += w * _kernel_matrix(kernel, (k - j) * h, N).T @ s[k]
    times = grid.t0 + h * np.arange(n_pts)
    return AdjointState(p, times)


# ---------------------------------------------------------------------------
# Shadow price of a terminal risk functional
# ---------------------------------------------------------------------------


def shadow_price(model: SdeModel, grid: PathGrid, y0, functional: Callable, gradient: Callable | None,
                 window, method: str = "pathwise", n_paths: int = 10_000, seed: int = 0) -> ShadowPrice:
    """Monte Carlo estimate of ``E[D_t f(Y_T)]`` in Brownian coordinates.

    ``pathwise`` averages ``V(t, Y_t)^T J[T<-t]^T grad f(Y_T)``; ``bel``
    averages ``f(Y_T) H`` with the elliptic weight and maps the result back
    from whitened noise coordinates.
    """
    batch = simulate_paths(model, grid, y0, n_paths, seed)
    i0, i1 = grid.index(window[0]), grid.index(window[1])
    YT = batch.states[:, i1]
    if method == "pathwise":
        if gradient is None:
            raise ConfigurationError("pathwise shadow price needs the functional's gradient")
        J = flow_jacobians_batch(model, grid, batch.states, batch.increments, anchor=i0, stop=i1)[:, -1]
        V = np.asarray(model.diffusion(grid.times[i0], batch.states[:, i0]), float)
        gT = np.asarray(gradient(YT), float)
        samples = np.einsum("nid,nji,nj->nd", V, J, gT)
    elif method == "bel":
        H = bel_weights_batch(model, grid, batch.states, batch.increments, (window[0], window[1]))
        f = np.asarray(functional(YT), float)
        Rh_inv = np.linalg.inv(model.sqrt_correlation)
        samples = (f[:, None] * H) @ Rh_inv.T
    else:
        raise ConfigurationError(f"unknown shadow-price method {method!r}")
    n = samples.shape[0]
    return ShadowPrice(samples.mean(axis=0), samples.std(axis=0, ddof=1) / np.sqrt(n), method, n)


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------


class MyopicController(BaseEstimator):
    """Myopic controller with an estimator-style interface.

    ``fit`` validates the gain and feasible set; ``predict`` maps positions
    (one row per sample) to speeds.  The terminal ramp replaces the drive in the
    last ``feasible.terminal_window`` of the horizon by a straight-line
    liquidation toward ``feasible.terminal_target``.
    """

    def __init__(self, gain: SeparableGain | None = None, feasible: FeasibleSet | None = None,
                 dt: float = 1.0, risk_price=0.0, horizon: float | None = None,
                 max_sweeps: int = 500, tol: float = 1e-10):
        self.gain = gain
        self.feasible = feasible
        self.dt = dt
        self.risk_price = risk_price
        self.horizon = horizon
        self.max_sweeps = max_sweeps
        self.tol = tol

    def fit(self, X=None, y=None):
        if self.gain is None:
            raise ConfigurationError("MyopicController needs a SeparableGain")
        if self.dt <= 0:
            raise ConfigurationError("dt must be > 0")
        self.n_assets_ = self.gain.n_assets
        self.xi_min_eig_ = self.gain.xi_min_eig
        if self.feasible is not None:
            self.feasible.effective_box((self.n_assets_,))
        return self

    def speed(self, position, t: float | None = None, extra_drive=None, risk_price=None) -> np.ndarray:
        check_is_fitted(self, "n_assets_")
        phi = as_vector(position, self.n_assets_, "position")
        fs = self.feasible
        if (fs is not None and fs.terminal_target is not None and t is not None and self.horizon is not None
                and t >= self.horizon - fs.terminal_window - 1e-12):
            remaining = max(self.horizon - t, self.dt)
            v = (as_vector(fs.terminal_target, self.n_assets_) - phi) / remaining
            return project_feasible(v, fs, kind="speed", position=phi, dt=self.dt)
        rp = self.risk_price if risk_price is None else risk_price
        return myopic_step(self.gain, phi, rp, fs, self.dt, extra_drive, self.max_sweeps, self.tol)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "n_assets_")
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != self.n_assets_:
            raise ConfigurationError(f"expected {self.n_assets_} position columns, got {X.shape[1]}")
        return np.vstack([self.speed(row) for row in X])
