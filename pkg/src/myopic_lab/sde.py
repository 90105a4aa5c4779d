"""Market-state SDE engine.

Euler-Maruyama on the Itô form, Itô/Stratonovich drift conversion, first
variation (flow Jacobian) propagation, Malliavin covariance and the elliptic
Bismut-Elworthy-Li weight.

Model callables are vectorized: ``drift_ito(t, x)`` receives ``x`` of shape
``(..., M)`` and returns ``(..., M)``; ``diffusion(t, x)`` returns
``(..., M, d)``.  Optional analytic derivatives follow the same convention:
``drift_jacobian`` returns ``(..., M, M)`` with entry ``[i, j] = d b_i / d x_j``
and ``diffusion_jacobian`` returns ``(..., M, M, d)`` with entry
``[i, j, k] = d V_ik / d x_j``.

Random numbers come from Philox streams keyed by ``(seed, block)`` where a
block holds 64 consecutive path indices; inside a block each path owns a fixed
row and steps are drawn in time order.  A path's increments therefore depend
only on ``(seed, path_index, step)`` and never on which other paths are
simulated alongside it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ._validation import ConfigurationError, check_positive, check_psd
from .exceptions import EllipticityError, NumericalDomainError

__all__ = [
    "SdeModel",
    "PathGrid",
    "MarketPath",
    "PathBatch",
    "FlowJacobian",
    "MalliavinCov",
    "arithmetic_brownian",
    "geometric_brownian",
    "ornstein_uhlenbeck",
    "brownian_increments",
    "drift_jacobian",
    "diffusion_jacobian",
    "convert_drift",
    "euler_maruyama",
    "simulate_paths",
    "simulate_terminal",
    "flow_jacobians_batch",
    "flow_and_malliavin",
    "bel_weight",
    "bel_weights_batch",
    "BLOCK_SIZE",
]

BLOCK_SIZE = 64
FD_REL_STEP = 1e-6


# ---------------------------------------------------------------------------
# Model and grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdeModel:
    """Itô SDE ``dY = b(t, Y) dt + V(t, Y) dB`` with ``d<B> = R dt``."""

    dim_state: int
    dim_noise: int
    drift_ito: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    correlation: np.ndarray | None = None
    drift_jac: Callable[[float, np.ndarray], np.ndarray] | None = None
    diffusion_jac: Callable[[float, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if int(self.dim_state) < 1 or int(self.dim_noise) < 1:
            raise ConfigurationError("dim_state and dim_noise must be positive integers")
        R = np.eye(self.dim_noise) if self.correlation is None else np.asarray(self.correlation, float)
        if R.shape != (self.dim_noise, self.dim_noise):
            raise ConfigurationError("correlation must be d x d")
        check_psd(R, "correlation", strict=True)
        object.__setattr__(self, "correlation", R)

    @property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.correlation)

    @property
    def sqrt_correlation(self) -> np.ndarray:
        """Symmetric square root of ``R``."""
        w, U = np.linalg.eigh(self.correlation)
        return (U * np.sqrt(w)) @ U.T

    @classmethod
    def from_stratonovich(cls, dim_state, dim_noise, drift_strat, diffusion, correlation=None,
                          diffusion_jac=None) -> "SdeModel":
        """Build a model from a Stratonovich drift by adding the Itô correction."""
        tmp = cls(dim_state, dim_noise, drift_strat, diffusion, correlation, None, diffusion_jac)

        def drift_ito(t, x):
            return np.asarray(drift_strat(t, x), float) + _ito_correction(tmp, t, np.asarray(x, float))

        return cls(dim_state, dim_noise, drift_ito, diffusion, tmp.correlation, None, diffusion_jac)

    def check_shapes(self, t: float, x) -> None:
        x = np.asarray(x, float)
        b = np.asarray(self.drift_ito(t, x))
        V = np.asarray(self.diffusion(t, x))
        if b.shape[-1:] != (self.dim_state,):
            raise ConfigurationError(f"drift returned shape {b.shape}")
        if V.shape[-2:] != (self.dim_state, self.dim_noise):
            raise ConfigurationError(f"diffusion returned shape {V.shape}, expected (..., M, d)")


@dataclass(frozen=True)
class PathGrid:
    horizon: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        check_positive(self.horizon, "horizon")
        if int(self.n_steps) < 1:
            raise ConfigurationError("n_steps must be >= 1")

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.n_steps + 1)

    def index(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must sit on the grid."""
        pos = (t - self.t0) / self.step
        k = int(round(pos))
        if abs(pos - k) > 1e-9 * max(1.0, abs(pos)) or not 0 <= k <= self.n_steps:
            raise ConfigurationError(f"time {t} is not a grid point of {self}")
        return k


@dataclass(frozen=True)
class MarketPath:
    states: np.ndarray
    brownian_increments: np.ndarray
    seed: int
    path_index: int
    grid: PathGrid | None = None


@dataclass
class PathBatch:
    """Simulated paths stacked along axis 0; blown-up paths are already removed."""

    states: np.ndarray  # (n, K+1, M)
    increments: np.ndarray  # (n, K, d)
    path_index: np.ndarray
    seed: int
    grid: PathGrid
    n_blown_up: int = 0
    blown_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> MarketPath:
        return MarketPath(self.states[i], self.increments[i], self.seed, int(self.path_index[i]), self.grid)

    def __iter__(self) -> Iterator[MarketPath]:
        return (self[i] for i in range(len(self)))

    @property
    def blow_up_fraction(self) -> float:
        total = len(self) + self.n_blown_up
        return self.n_blown_up / total if total else 0.0


@dataclass(frozen=True)
class FlowJacobian:
    anchor_index: int
    jacobians: np.ndarray  # (K+1-anchor, M, M); jacobians[u - anchor] = J[u <- anchor]

    def between(self, u: int, r: int) -> np.ndarray:
        """``J[u <- r]`` for anchor <= r <= u, via the discrete cocycle."""
        Ju = self.jacobians[u - self.anchor_index]
        Jr = self.jacobians[r - self.anchor_index]
        return np.linalg.solve(Jr.T, Ju.T).T


@dataclass(frozen=True)
class MalliavinCov:
    gamma: np.ndarray
    window: tuple[float, float]

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.gamma).min())


# ---------------------------------------------------------------------------
# Reference models
# ---------------------------------------------------------------------------


def arithmetic_brownian(drift, vol, correlation=None) -> SdeModel:
    """``dY = drift dt + vol dB`` with constant coefficients (``vol`` is M x d)."""
    drift = np.atleast_1d(np.asarray(drift, float))
    vol = np.asarray(vol, float)
    if vol.ndim == 0:
        vol = vol.reshape(1, 1)
    elif vol.ndim == 1:
        vol = np.diag(vol)
    M, d = vol.shape

    def b(t, x):
        return np.broadcast_to(drift, np.shape(x)).copy()

    def V(t, x):
        return np.broadcast_to(vol, np.shape(x)[:-1] + (M, d)).copy()

    def db(t, x):
        return np.zeros(np.shape(x)[:-1] + (M, M))

    def dV(t, x):
        return np.zeros(np.shape(x)[:-1] + (M, M, d))

    return SdeModel(M, d, b, V, correlation, db, dV)


def geometric_brownian(mu, sigma, correlation=None) -> SdeModel:
    """Componentwise GBM ``dY_i = mu_i Y_i dt + sigma_i Y_i dB_i``."""
    mu = np.atleast_1d(np.asarray(mu, float))
    sigma = np.atleast_1d(np.asarray(sigma, float))
    M = mu.shape[0]
    eye = np.eye(M)

    def b(t, x):
        return mu * x

    def V(t, x):
        return (sigma * x)[..., :, None] * eye

    def db(t, x):
        return np.broadcast_to(np.diag(mu), np.shape(x)[:-1] + (M, M)).copy()

    def dV(t, x):
        out = np.zeros(np.shape(x)[:-1] + (M, M, M))
        for i in range(M):
            out[..., i, i, i] = sigma[i]
        return out

    return SdeModel(M, M, b, V, correlation, db, dV)


def ornstein_uhlenbeck(kappa, sigma, mean=0.0) -> SdeModel:
    """Componentwise OU ``dY = -kappa (Y - mean) dt + sigma dB``."""
    kappa = np.atleast_1d(np.asarray(kappa, float))
    sigma = np.atleast_1d(np.asarray(sigma, float))
    mean = np.broadcast_to(np.asarray(mean, float), kappa.shape)
    M = kappa.shape[0]
    base = arithmetic_brownian(np.zeros(M), np.diag(sigma))

    def b(t, x):
        return -kappa * (x - mean)

    def db(t, x):
        return np.broadcast_to(-np.diag(kappa), np.shape(x)[:-1] + (M, M)).copy()

    return SdeModel(M, M, b, base.diffusion, None, db, base.diffusion_jac)


# ---------------------------------------------------------------------------
# Derivatives and drift conversion
# ---------------------------------------------------------------------------


def _fd_steps(x: np.ndarray) -> np.ndarray:
    return FD_REL_STEP * (1.0 + np.abs(x))


def drift_jacobian(model: SdeModel, t: float, x) -> np.ndarray:
    """``(..., M, M)`` drift Jacobian, analytic if supplied else central differences."""
    x = np.asarray(x, float)
    if model.drift_jac is not None:
        return np.asarray(model.drift_jac(t, x), float)
    M = model.dim_state
    out = np.empty(x.shape + (M,))
    h = _fd_steps(x)
    for j in range(M):
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h[..., j]
        xm[..., j] -= h[..., j]
        diff = np.asarray(model.drift_ito(t, xp)) - np.asarray(model.drift_ito(t, xm))
        out[..., :, j] = diff / (2.0 * h[..., j, None])
    return out


def diffusion_jacobian(model: SdeModel, t: float, x) -> np.ndarray:
    """``(..., M, M, d)`` tensor ``[i, j, k] = d V_ik / d x_j``."""
    x = np.asarray(x, float)
    if model.diffusion_jac is not None:
        return np.asarray(model.diffusion_jac(t, x), float)
    M, d = model.dim_state, model.dim_noise
    out = np.empty(x.shape[:-1] + (M, M, d))
    h = _fd_steps(x)
    for j in range(M):
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h[..., j]
        xm[..., j] -= h[..., j]
        diff = np.asarray(model.diffusion(t, xp)) - np.asarray(model.diffusion(t, xm))
        out[..., :, j, :] = diff / (2.0 * h[..., j, None, None])
    return out


def _ito_correction(model: SdeModel, t: float, x: np.ndarray) -> np.ndarray:
    """Half the double contraction ``sum_jk dV_ik/dx_j (V R)_jk``."""
    DV = diffusion_jacobian(model, t, x)
    VR = np.asarray(model.diffusion(t, x), float) @ model.correlation
    corr = 0.5 * np.einsum("...ijk,...jk->...i", DV, VR)
    if not np.all(np.isfinite(corr)):
        raise NumericalDomainError("non-finite diffusion Jacobian in drift conversion")
    return corr


def convert_drift(model: SdeModel, direction: str, probe: tuple[float, np.ndarray], drift=None) -> np.ndarray:
    """Convert a drift between the Itô and Stratonovich readings at ``probe``.

    Parameters
    ----------
    direction : {"ito_to_strat", "strat_to_ito"}
    probe : (t, x)
    drift : array, optional
        Drift to convert.  Defaults to the model's Itô drift for
        ``ito_to_strat``; required for ``strat_to_ito``.
    """
    t, x = probe
    x = np.asarray(x, float)
    corr = _ito_correction(model, t, x)
    if direction == "ito_to_strat":
        base = model.drift_ito(t, x) if drift is None else drift
        return np.asarray(base, float) - corr
    if direction == "strat_to_ito":
        if drift is None:
            raise ConfigurationError("strat_to_ito needs the Stratonovich drift")
        return np.asarray(drift, float) + corr
    raise ConfigurationError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# Random numbers and simulation
# ---------------------------------------------------------------------------


def _block_normals(seed: int, block: int, n_steps: int, d: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(block)]))
    # Step-major draw: the first k steps do not depend on the horizon length.
    return gen.standard_normal((n_steps, BLOCK_SIZE, d))


def brownian_increments(seed: int, path_indices: Sequence[int], n_steps: int, dim_noise: int,
                        step: float, correlation: np.ndarray | None = None) -> np.ndarray:
    """Correlated Brownian increments ``(n, n_steps, d)`` with covariance ``R * step``."""
    idx = np.asarray(path_indices, dtype=np.int64)
    if np.any(idx < 0):
        raise ConfigurationError("path indices must be nonnegative")
    out = np.empty((idx.size, n_steps, dim_noise))
    blocks = idx // BLOCK_SIZE
    for blk in np.unique(blocks):
        sel = np.nonzero(blocks == blk)[0]
        z = _block_normals(seed, int(blk), n_steps, dim_noise)
        out[sel] = np.transpose(z[:, idx[sel] % BLOCK_SIZE, :], (1, 0, 2))
    if correlation is not None and dim_noise > 1:
        out = out @ np.linalg.cholesky(correlation).T
    return out * np.sqrt(step)


def euler_maruyama(model: SdeModel, grid: PathGrid, y0, increments: np.ndarray) -> np.ndarray:
    """Euler-Maruyama states ``(n, K+1, M)`` driven by the given increments.

    Paths whose state becomes non-finite are frozen at NaN from that step on.
    """
    n, K, _ = increments.shape
    M = model.dim_state
    y = np.empty((n, K + 1, M))
    y[:, 0] = np.broadcast_to(np.asarray(y0, float), (n, M))
    h = grid.step
    times = grid.times
    with np.errstate(all="ignore"):
        for k in range(K):
            x = y[:, k]
            b = np.asarray(model.drift_ito(times[k], x))
            V = np.asarray(model.diffusion(times[k], x))
            y[:, k + 1] = x + b * h + np.einsum("nij,nj->ni", V, increments[:, k])
    return y


def _simulate_chunk(model, grid, y0, seed, idx):
    dB = brownian_increments(seed, idx, grid.n_steps, model.dim_noise, grid.step, model.correlation)
    return euler_maruyama(model, grid, y0, dB), dB


def _chunks(idx: np.ndarray, size: int) -> list[np.ndarray]:
    return [idx[i:i + size] for i in range(0, idx.size, size)] or [idx]


def simulate_paths(model: SdeModel, grid: PathGrid, y0, n_paths: int, seed: int, *,
                   path_offset: int = 0, n_threads: int = 1, chunk_size: int = 8192) -> PathBatch:
    """Simulate ``n_paths`` paths with indices ``path_offset, path_offset + 1, ...``.

    Non-finite paths are dropped and counted in ``n_blown_up``.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    model.check_shapes(grid.t0, np.asarray(y0, float))
    idx = np.arange(path_offset, path_offset + n_paths, dtype=np.int64)
    parts = _chunks(idx, chunk_size)
    if n_threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(lambda c: _simulate_chunk(model, grid, y0, seed, c), parts))
    else:
        results = [_simulate_chunk(model, grid, y0, seed, c) for c in parts]
    states = np.concatenate([r[0] for r in results])
    incs = np.concatenate([r[1] for r in results])
    ok = np.all(np.isfinite(states), axis=(1, 2))
    return PathBatch(states[ok], incs[ok], idx[ok], int(seed), grid,
                     n_blown_up=int((~ok).sum()), blown_indices=idx[~ok])


def simulate_terminal(model: SdeModel, grid: PathGrid, y0, n_paths: int, seed: int, *,
                      path_offset: int = 0, chunk_size: int = 8192) -> tuple[np.ndarray, int]:
    """Terminal states only, in bounded memory.  Returns ``(Y_T, n_blown_up)``."""
    idx = np.arange(path_offset, path_offset + n_paths, dtype=np.int64)
    out = []
    blown = 0
    for c in _chunks(idx, chunk_size):
        y, _ = _simulate_chunk(model, grid, y0, seed, c)
        yt = y[:, -1]
        ok = np.all(np.isfinite(yt), axis=1)
        blown += int((~ok).sum())
        out.append(yt[ok])
    return np.concatenate(out), blown


# ---------------------------------------------------------------------------
# First variation, Malliavin covariance, BEL weight
# ---------------------------------------------------------------------------


def flow_jacobians_batch(model: SdeModel, grid: PathGrid, states: np.ndarray, increments: np.ndarray,
                         anchor: int = 0, stop: int | None = None) -> np.ndarray:
    """``J[u <- anchor]`` for ``u = anchor..stop`` on every path: ``(n, stop-anchor+1, M, M)``."""
    stop = grid.n_steps if stop is None else stop
    n, _, M = states.shape
    h = grid.step
    times = grid.times
    J = np.empty((n, stop - anchor + 1, M, M))
    J[:, 0] = np.eye(M)
    for k in range(anchor, stop):
        x = states[:, k]
        Db = drift_jacobian(model, times[k], x)
        DV = diffusion_jacobian(model, times[k], x)
        step_mat = np.eye(M) + Db * h + np.einsum("nijk,nk->nij", DV, increments[:, k])
        J[:, k - anchor + 1] = step_mat @ J[:, k - anchor]
    return J


def _window(grid: PathGrid, window) -> tuple[int, int]:
    t, T = window
    i0, i1 = grid.index(t), grid.index(T)
    if i1 <= i0:
        raise ConfigurationError("window must satisfy t < T")
    return i0, i1


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def flow_and_malliavin(model: SdeModel, path: MarketPath, window, grid: PathGrid | None = None
                       ) -> tuple[FlowJacobian, MalliavinCov]:
    """Flow Jacobian anchored at the window start and the Malliavin covariance on the window.

    ``Gamma = int_t^T J[T<-s] A(s) J[T<-s]^T ds`` with ``A = V R V^T``, trapezoid rule.
    """
    grid = grid or path.grid
    if grid is None:
        raise ConfigurationError("a PathGrid is required")
    i0, i1 = _window(grid, window)
    states = path.states[None]
    incs = path.brownian_increments[None]
    J = flow_jacobians_batch(model, grid, states, incs, anchor=i0, stop=grid.n_steps)[0]
    flow = FlowJacobian(i0, J)
    J_T = J[i1 - i0]
    times = grid.times
    idx = np.arange(i0, i1 + 1)
    # J[T <- s] = J[T <- t] J[s <- t]^{-1}
    J_s = J[idx - i0]
    J_Ts = np.linalg.solve(np.transpose(J_s, (0, 2, 1)), np.broadcast_to(J_T.T, J_s.shape))
    J_Ts = np.transpose(J_Ts, (0, 2, 1))
    V = np.stack([np.asarray(model.diffusion(times[k], path.states[k]), float) for k in idx])
    A = V @ model.correlation @ np.transpose(V, (0, 2, 1))
    integrand = J_Ts @ A @ np.transpose(J_Ts, (0, 2, 1))
    w = _trapezoid_weights(idx.size, grid.step)
    gamma = np.einsum("k,kij->ij", w, integrand)
    gamma = 0.5 * (gamma + gamma.T)
    return flow, MalliavinCov(gamma, (times[i0], times[i1]))


def bel_weights_batch(model: SdeModel, grid: PathGrid, states: np.ndarray, increments: np.ndarray,
                      window, jacobians: np.ndarray | None = None) -> np.ndarray:
    """Elliptic BEL weights ``(n, d)`` over ``window`` for every path.

    ``H = (1/(T-t)) sum_k (Sigma_k^{-1} J[s_k <- t] Sigma_t)^T dW_k`` with
    ``Sigma = V R^{1/2}`` and ``dW = R^{-1/2} dB``.  Requires ``M == d``.
    """
    M, d = model.dim_state, model.dim_noise
    if M != d:
        raise EllipticityError("elliptic BEL weight needs a square diffusion (M == d)")
    i0, i1 = _window(grid, window)
    times = grid.times
    if jacobians is None:
        jacobians = flow_jacobians_batch(model, grid, states, increments, anchor=i0, stop=i1)
    Rh = model.sqrt_correlation
    Rh_inv = np.linalg.inv(Rh)
    n = states.shape[0]
    sig_t = np.asarray(model.diffusion(times[i0], states[:, i0]), float) @ Rh
    H = np.zeros((n, d))
    for k in range(i0, i1):
        sig_k = np.asarray(model.diffusion(times[k], states[:, k]), float) @ Rh
        det = np.abs(np.linalg.det(sig_k))
        scale = np.max(np.abs(sig_k), axis=(1, 2)) ** d
        if np.any(~np.isfinite(det)) or np.any(det <= 1e-14 * np.maximum(scale, 1e-300)):
            raise EllipticityError(f"diffusion is singular at step {k}")
        M_k = np.linalg.solve(sig_k, jacobians[:, k - i0] @ sig_t)
        dW = increments[:, k] @ Rh_inv.T
        H += np.einsum("nij,ni->nj", M_k, dW)
    return H / (times[i1] - times[i0])


def bel_weight(model: SdeModel, path: MarketPath, window, grid: PathGrid | None = None) -> np.ndarray:
    """Single-path elliptic BEL weight, a vector of length ``d``."""
    grid = grid or path.grid
    if grid is None:
        raise ConfigurationError("a PathGrid is required")
    return bel_weights_batch(model, grid, path.states[None], path.brownian_increments[None], window)[0]
