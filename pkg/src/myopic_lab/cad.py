"""Control-affects-dynamics (CAD) experiments.

The market follows the Itô SDE
``dY = (b + eps F0(t, Y, phi, v)) dt + (V + eps F(t, Y, phi, v)) dB``
where ``v`` is the trading speed.  Strategies here are open-loop speed
schedules, so the first variation in ``eps`` is

``dY'_{k+1} = dY'_k + (Db dY'_k + F0) h + sum_j (DV_j dY'_k + F_j) dB_j``

along the ``eps = 0`` path.  The premium density ``chi_t`` is the gradient of
``E[U(Y_T)]`` with respect to ``v_t`` through the feedback, computed from the
backward costate ``lambda_k = J_{k+1 <- k}' lambda_{k+1}``, ``lambda_K = grad U``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from ._validation import as_vector
from .exceptions import BlowUpError, ConfigurationError
from .mo import FeasibleSet, SeparableGain, myopic_step
from .sde import PathGrid, SdeModel, brownian_increments, diffusion_jacobian, drift_jacobian

__all__ = [
    "CadModel",
    "QuadraticUtility",
    "CadPaths",
    "CadPremium",
    "CadScanRow",
    "CadScanReport",
    "simulate_cad",
    "cad_premium",
    "finite_difference_check",
    "evaluate_policy",
    "surplus_holds",
    "surplus_and_scan",
    "share_regression",
]

FD_STEP = 1e-6


@dataclass
class CadModel:
    """Base SDE plus control feedback of scale ``scale``.

    ``drift_feedback(t, y, phi, v) -> (n, M)`` and
    ``diffusion_feedback(t, y, phi, v) -> (n, M, d)``.  Sensitivities in ``v``
    default to central differences.  ``depth`` normalizes speed into market
    share ``|v| / depth``.
    """

    base: SdeModel
    drift_feedback: Callable | None = None
    diffusion_feedback: Callable | None = None
    scale: float = 0.0
    drift_sens: Callable | None = None
    diff_sens: Callable | None = None
    depth: float = 1.0
    n_assets: int = 1

    def __post_init__(self):
        if not 0.0 <= self.scale <= 1.0:
            raise ConfigurationError("scale must lie in [0, 1]")
        if not self.depth > 0:
            raise ConfigurationError("depth must be > 0")

    def market_share(self, speed) -> np.ndarray:
        return np.abs(np.asarray(speed, float)) / self.depth

    def with_scale(self, scale: float) -> "CadModel":
        return CadModel(self.base, self.drift_feedback, self.diffusion_feedback, scale, self.drift_sens,
                        self.diff_sens, self.depth, self.n_assets)

    def _fd(self, fn, t, y, phi, v):
        n = y.shape[0]
        out = []
        for j in range(self.n_assets):
            e = np.zeros_like(v)
            e[:, j] = FD_STEP * (1.0 + np.abs(v[:, j]))
            d = (np.asarray(fn(t, y, phi, v + e)) - np.asarray(fn(t, y, phi, v - e)))
            out.append(d / (2 * e[:, j].reshape((n,) + (1,) * (d.ndim - 1))))
        return np.stack(out, axis=-1)

    def drift_sensitivity(self, t, y, phi, v) -> np.ndarray:
        """``(n, M, N)``."""
        if self.drift_feedback is None:
            return np.zeros(y.shape + (self.n_assets,))
        if self.drift_sens is not None:
            return np.asarray(self.drift_sens(t, y, phi, v), float)
        return self._fd(self.drift_feedback, t, y, phi, v)

    def diffusion_sensitivity(self, t, y, phi, v) -> np.ndarray:
        """``(n, M, d, N)``."""
        if self.diffusion_feedback is None:
            return np.zeros(y.shape + (self.base.dim_noise, self.n_assets))
        if self.diff_sens is not None:
            return np.asarray(self.diff_sens(t, y, phi, v), float)
        return self._fd(self.diffusion_feedback, t, y, phi, v)


@dataclass(frozen=True)
class QuadraticUtility:
    """``U(y) = <w, y> - b |y|^2 / 2`` on the state."""

    weights: np.ndarray | float = 1.0
    curvature: float = 0.0

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        return (np.asarray(self.weights) * y).sum(axis=-1) - 0.5 * self.curvature * (y * y).sum(axis=-1)

    def gradient(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        return np.broadcast_to(np.asarray(self.weights, float), y.shape) - self.curvature * y


def _speeds_array(speeds, grid: PathGrid, n: int, n_assets: int) -> np.ndarray:
    v = np.asarray(speeds, float)
    K = grid.n_steps
    if v.ndim <= 1:
        v = np.broadcast_to(v.reshape(1, 1, -1) if v.ndim else v.reshape(1, 1, 1), (n, K, n_assets))
    elif v.ndim == 2:
        v = np.broadcast_to(v[None], (n, K, n_assets))
    if v.shape != (n, K, n_assets):
        raise ConfigurationError(f"speed schedule has shape {v.shape}, expected (n, {K}, {n_assets})")
    return v


@dataclass
class CadPaths:
    states: np.ndarray
    increments: np.ndarray
    positions: np.ndarray
    speeds: np.ndarray
    first_variation: np.ndarray | None
    base_states: np.ndarray | None
    n_blown_up: int = 0


def _euler_cad(model: CadModel, grid: PathGrid, y0, dB, phi, v, eps: float) -> np.ndarray:
    n, K, _ = dB.shape
    M = model.base.dim_state
    y = np.empty((n, K + 1, M))
    y[:, 0] = np.broadcast_to(np.asarray(y0, float), (n, M))
    h = grid.step
    times = grid.times
    with np.errstate(all="ignore"):
        for k in range(K):
            x = y[:, k]
            b = np.asarray(model.base.drift_ito(times[k], x))
            V = np.asarray(model.base.diffusion(times[k], x))
            if eps != 0.0:
                if model.drift_feedback is not None:
                    b = b + eps * np.asarray(model.drift_feedback(times[k], x, phi[:, k], v[:, k]))
                if model.diffusion_feedback is not None:
                    V = V + eps * np.asarray(model.diffusion_feedback(times[k], x, phi[:, k], v[:, k]))
            y[:, k + 1] = x + b * h + np.einsum("nij,nj->ni", V, dB[:, k])
    return y


def simulate_cad(model: CadModel, speeds, grid: PathGrid, y0, n_paths: int, seed: int, *, phi0=0.0,
                 path_offset: int = 0, first_variation: bool = True, max_blowup: float = 1e-3) -> CadPaths:
    """Simulate the feedback SDE at ``model.scale`` and the first variation along the base path.

    Raises :class:`BlowUpError` when more than ``max_blowup`` of the paths
    become non-finite.
    """
    base = model.base
    idx = np.arange(path_offset, path_offset + n_paths)
    dB = brownian_increments(seed, idx, grid.n_steps, base.dim_noise, grid.step, base.correlation)
    v = _speeds_array(speeds, grid, n_paths, model.n_assets)
    phi = np.empty((n_paths, grid.n_steps + 1, model.n_assets))
    phi[:, 0] = np.broadcast_to(np.asarray(phi0, float), (n_paths, model.n_assets))
    phi[:, 1:] = phi[:, :1] + np.cumsum(v, axis=1) * grid.step
    y = _euler_cad(model, grid, y0, dB, phi, v, model.scale)
    ok = np.all(np.isfinite(y), axis=(1, 2))
    blown = int((~ok).sum())
    if blown > max_blowup * n_paths:
        raise BlowUpError(f"{blown} of {n_paths} paths blew up")
    y0_path = y if model.scale == 0.0 else _euler_cad(model, grid, y0, dB, phi, v, 0.0)
    dY = None
    if first_variation:
        dY = _first_variation(model, grid, y0_path, dB, phi, v)
    return CadPaths(y, dB, phi, v, dY, y0_path, blown)


def _first_variation(model: CadModel, grid: PathGrid, y, dB, phi, v) -> np.ndarray:
    n, K, _ = dB.shape
    M = model.base.dim_state
    dY = np.zeros((n, K + 1, M))
    h = grid.step
    times = grid.times
    for k in range(K):
        x = y[:, k]
        Db = drift_jacobian(model.base, times[k], x)
        DV = diffusion_jacobian(model.base, times[k], x)
        F0 = np.zeros((n, M)) if model.drift_feedback is None else np.asarray(
            model.drift_feedback(times[k], x, phi[:, k], v[:, k]))
        dvar = np.einsum("nij,nj->ni", Db, dY[:, k]) + F0
        noise = np.einsum("nijk,nj,nk->ni", DV, dY[:, k], dB[:, k])
        if model.diffusion_feedback is not None:
            F = np.asarray(model.diffusion_feedback(times[k], x, phi[:, k], v[:, k]))
            noise = noise + np.einsum("nik,nk->ni", F, dB[:, k])
        dY[:, k + 1] = dY[:, k] + dvar * h + noise
    return dY


# ---------------------------------------------------------------------------
# Premium density
# ---------------------------------------------------------------------------


@dataclass
class CadPremium:
    chi: np.ndarray
    se: np.ndarray
    costate_mean: np.ndarray
    directional: float
    directional_se: float
    per_path_directional: np.ndarray = field(repr=False, default=None)


def cad_premium(model: CadModel, speeds, grid: PathGrid, y0, utility: QuadraticUtility, n_paths: int,
                seed: int, *, phi0=0.0, path_offset: int = 0, method: str = "auto") -> CadPremium:
    """Monte Carlo premium density ``chi_t`` (shape ``(K, N)``) with standard errors.

    The drift term is ``E[phi0_t' lambda_{t+1}]`` and the diffusion term uses
    the one-step weight ``dB_t / h``: ``E[(phi1_t dB_t / h)' lambda_{t+1}]``.
    ``directional`` estimates ``sum_t <chi_t, v_t> h``, the derivative of
    ``E[U(Y_T)]`` in the scale.
    """
    if method not in ("auto", "bel", "drift_only"):
        raise ConfigurationError("method must be 'auto', 'bel' or 'drift_only'")
    if method == "bel" and model.diffusion_feedback is None:
        warnings.warn("no diffusion feedback: diffusion premium term skipped", RuntimeWarning)
    base_model = model.with_scale(0.0)
    paths = simulate_cad(base_model, speeds, grid, y0, n_paths, seed, phi0=phi0, path_offset=path_offset,
                         first_variation=False)
    y, dB, phi, v = paths.states, paths.increments, paths.positions, paths.speeds
    n, K, _ = dB.shape
    h = grid.step
    times = grid.times
    lam = utility.gradient(y[:, -1])
    costate_mean = lam.mean(axis=0)
    contrib = np.empty((n, K, model.n_assets))
    use_diff = model.diffusion_feedback is not None and method != "drift_only"
    for k in range(K - 1, -1, -1):
        x = y[:, k]
        phi0_k = model.drift_sensitivity(times[k], x, phi[:, k], v[:, k])
        c = np.einsum("nij,ni->nj", phi0_k, lam)
        if use_diff:
            phi1_k = model.diffusion_sensitivity(times[k], x, phi[:, k], v[:, k])
            c = c + np.einsum("nikj,nk,ni->nj", phi1_k, dB[:, k], lam) / h
        contrib[:, k] = c
        Db = drift_jacobian(model.base, times[k], x)
        DV = diffusion_jacobian(model.base, times[k], x)
        step_mat = np.eye(model.base.dim_state) + Db * h + np.einsum("nijk,nk->nij", DV, dB[:, k])
        lam = np.einsum("nij,ni->nj", step_mat, lam)
    chi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / np.sqrt(n)
    per_path = (contrib * v).sum(axis=(1, 2)) * h
    return CadPremium(chi, se, costate_mean, float(per_path.mean()),
                      float(per_path.std(ddof=1) / np.sqrt(n)), per_path)


def finite_difference_check(model: CadModel, speeds, grid: PathGrid, y0, utility: QuadraticUtility,
                            eps: float, n_paths: int, seed: int, *, phi0=0.0) -> dict:
    """Central difference ``(J(eps) - J(-eps)) / 2`` against ``eps * directional`` on common paths.

    The negative scale is simulated directly (outside the model's ``[0, 1]``
    range check) because only the difference quotient is needed.
    """
    prem = cad_premium(model, speeds, grid, y0, utility, n_paths, seed, phi0=phi0)
    base = model.base
    idx = np.arange(n_paths)
    dB = brownian_increments(seed, idx, grid.n_steps, base.dim_noise, grid.step, base.correlation)
    v = _speeds_array(speeds, grid, n_paths, model.n_assets)
    phi = np.empty((n_paths, grid.n_steps + 1, model.n_assets))
    phi[:, 0] = np.broadcast_to(np.asarray(phi0, float), (n_paths, model.n_assets))
    phi[:, 1:] = phi[:, :1] + np.cumsum(v, axis=1) * grid.step
    up = utility(_euler_cad(model, grid, y0, dB, phi, v, eps)[:, -1])
    dn = utility(_euler_cad(model, grid, y0, dB, phi, v, -eps)[:, -1])
    fd = 0.5 * (up - dn)
    fd_mean, fd_se = float(fd.mean()), float(fd.std(ddof=1) / np.sqrt(n_paths))
    mc, mc_se = eps * prem.directional, eps * prem.directional_se
    return {"fd": fd_mean, "fd_se": fd_se, "mc": mc, "mc_se": mc_se,
            "combined_se": float(np.hypot(fd_se, mc_se)), "premium": prem}


# ---------------------------------------------------------------------------
# Policies, surplus and the share scan
# ---------------------------------------------------------------------------


def _policy_speeds(gain: SeparableGain, feasible: FeasibleSet | None, grid: PathGrid, phi0, extra=None
                   ) -> np.ndarray:
    """Deterministic open-loop speeds from sequential myopic steps."""
    K, N = grid.n_steps, gain.n_assets
    phi = as_vector(phi0, N, "phi0").copy()
    out = np.empty((K, N))
    for k in range(K):
        e = None if extra is None else extra[k]
        out[k] = myopic_step(gain, phi, feasible=feasible, dt=grid.step, extra_drive=e)
        phi = phi + out[k] * grid.step
    return out


def evaluate_policy(model: CadModel, speeds, gain: SeparableGain, grid: PathGrid, y0,
                    utility: QuadraticUtility, n_paths: int, seed: int, *, phi0=0.0,
                    path_offset: int = 0) -> np.ndarray:
    """Per-path objective ``U(Y_T) + sum_t G(phi_t, v_t) h`` under the feedback model."""
    p = simulate_cad(model, speeds, grid, y0, n_paths, seed, phi0=phi0, path_offset=path_offset,
                     first_variation=False)
    run = gain.value(p.positions[:, :-1], p.speeds).sum(axis=1) * grid.step
    return utility(p.states[:, -1]) + run


def surplus_holds(chi_scaled, speed, gain: SeparableGain, risk_price=0.0, position=None) -> np.ndarray:
    """Pointwise ``<eps chi, v> > lam |v|_1 + v'Xi v / 2 + <risk + grad HC, v>``."""
    v = np.atleast_2d(np.asarray(speed, float))
    chi = np.broadcast_to(np.asarray(chi_scaled, float), v.shape)
    lhs = (chi * v).sum(axis=-1)
    rhs = np.abs(v) @ gain.l1_cost + 0.5 * np.einsum("...i,ij,...j->...", v, gain.temp_impact, v)
    lin = np.broadcast_to(np.asarray(risk_price, float), v.shape)
    if gain.holding_cost is not None and position is not None:
        lin = lin + gain.holding_cost.gradient(position)
    rhs = rhs + (lin * v).sum(axis=-1)
    return lhs > rhs


@dataclass
class CadScanRow:
    epsilon: float
    share_scale: float
    delta: float
    ci: tuple
    surplus_fraction: float
    chi_norm: float
    per_path: np.ndarray = field(repr=False, default=None)


@dataclass
class CadScanReport:
    rows: list
    slope: float = float("nan")
    slope_ci: tuple = (float("nan"), float("nan"))
    intercept: float = float("nan")
    intercept_ci: tuple = (float("nan"), float("nan"))
    slope_p: float = float("nan")

    def to_records(self) -> list[dict]:
        return [{"epsilon": r.epsilon, "share_scale": r.share_scale, "delta": r.delta, "ci": list(r.ci),
                 "surplus_fraction": r.surplus_fraction, "chi_norm": r.chi_norm} for r in self.rows]


def share_regression(shares, per_path_deltas, level: float = 0.95) -> dict:
    """Pooled OLS of per-path deltas on share: slope, intercept, their CIs and one-sided slope p-value."""
    x = np.concatenate([np.full(np.size(d), s) for s, d in zip(shares, per_path_deltas)])
    y = np.concatenate([np.ravel(d) for d in per_path_deltas])
    fit = stats.linregress(x, y)
    dof = x.size - 2
    q = stats.t.ppf(0.5 + level / 2, dof)
    slope_p = float(stats.t.sf(fit.slope / fit.stderr, dof)) if fit.stderr > 0 else float(fit.slope <= 0)
    return {
        "slope": float(fit.slope),
        "slope_ci": (fit.slope - q * fit.stderr, fit.slope + q * fit.stderr),
        "intercept": float(fit.intercept),
        "intercept_ci": (fit.intercept - q * fit.intercept_stderr, fit.intercept + q * fit.intercept_stderr),
        "slope_p": slope_p,
    }


def surplus_and_scan(model_for_share: Callable[[float], CadModel], gain: SeparableGain,
                     feasible_for_share: Callable[[float], FeasibleSet | None], grid: PathGrid, y0,
                     utility: QuadraticUtility, eps_grid, share_grid, n_paths: int, seed: int, *,
                     phi0=0.0, n_pilot: int = 2000, independent_points: bool = True) -> CadScanReport:
    """Paired A/B of the CAD-aware myopic policy against plain MO over an (eps, share) grid.

    The CAD-aware policy adds ``eps * chi_t`` to the myopic drive, with ``chi``
    from a pilot run on separate paths.  Each grid point uses its own block of
    path indices when ``independent_points`` so the share regression sees
    independent errors; MO and CAD-aware runs at a point share paths.
    """
    rows = []
    block = 0
    for eps in eps_grid:
        for share in share_grid:
            model = model_for_share(share).with_scale(eps)
            feasible = feasible_for_share(share)
            mo_speeds = _policy_speeds(gain, feasible, grid, phi0)
            prem = cad_premium(model, mo_speeds, grid, y0, utility, n_pilot, seed + 7919, phi0=phi0)
            cad_speeds = _policy_speeds(gain, feasible, grid, phi0, extra=eps * prem.chi)
            offset = block * n_paths if independent_points else 0
            block += 1
            j_cad = evaluate_policy(model, cad_speeds, gain, grid, y0, utility, n_paths, seed, phi0=phi0,
                                    path_offset=offset)
            j_mo = evaluate_policy(model, mo_speeds, gain, grid, y0, utility, n_paths, seed, phi0=phi0,
                                   path_offset=offset)
            d = j_cad - j_mo
            m = float(d.mean())
            se = float(d.std(ddof=1) / np.sqrt(d.size))
            phi_path = np.asarray(phi0, float) + np.vstack(
                [np.zeros((1, gain.n_assets)), np.cumsum(cad_speeds, axis=0)[:-1]]) * grid.step
            sfrac = float(np.mean([surplus_holds(eps * prem.chi[k], cad_speeds[k], gain, position=phi_path[k])[0]
                                   for k in range(grid.n_steps)]))
            rows.append(CadScanRow(float(eps), float(share), m, (m - 1.96 * se, m + 1.96 * se), sfrac,
                                   float(np.linalg.norm(prem.chi, axis=1).mean()), d))
    report = CadScanReport(rows)
    if len(share_grid) > 1 and len(eps_grid) == 1:
        reg = share_regression([r.share_scale for r in rows], [r.per_path for r in rows])
        report.slope, report.slope_ci = reg["slope"], reg["slope_ci"]
        report.intercept, report.intercept_ci = reg["intercept"], reg["intercept_ci"]
        report.slope_p = reg["slope_p"]
    return report
