"""Parametric policies trained by noisy preconditioned gradient ascent.

Training follows ``theta <- theta + eta_k G^{-1} (g_hat + b)`` where ``g_hat``
is an unbiased gradient estimate and ``b`` an optional contamination.  Many
independent replicas can be trained at once (``theta`` of shape ``(R, p)``),
which is how expected gaps are measured.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import as_vector, check_positive, check_psd
from .exceptions import ConfigurationError, DivergenceError
from .mo import FeasibleSet, project_feasible

__all__ = [
    "PolicyParams",
    "OptimizerConfig",
    "ContaminationSpec",
    "TrainTrace",
    "QuadraticTestbed",
    "LinearSignalEnv",
    "policy_action",
    "estimate_policy_gradient",
    "train",
    "preconditioned_ascent",
    "self_bias_accumulate",
    "fit_log_linear",
    "plateau_level",
    "gap_ratio",
    "PolicyGradientController",
]


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass
class PolicyParams:
    """Linear policy ``v = reshape(theta, (N, p/N)) @ features``."""

    theta: np.ndarray
    n_assets: int = 1
    feature_map: Callable | None = None
    clip: bool = False
    feasible: FeasibleSet | None = None
    dt: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float).ravel()
        if self.theta.size % self.n_assets:
            raise ConfigurationError("theta length must be a multiple of n_assets")
        if not np.all(np.isfinite(self.theta)):
            raise ConfigurationError("theta must be finite")

    @property
    def block(self) -> int:
        return self.theta.size // self.n_assets


def policy_action(params: PolicyParams, state=None, position=None, impact=None, features=None) -> np.ndarray:
    """Speed chosen by the linear policy; features come from ``feature_map`` unless given."""
    if features is None:
        if params.feature_map is None:
            raise ConfigurationError("need features or a feature map")
        features = params.feature_map(state, position, impact)
    f = np.asarray(features, float)
    if f.shape[-1] != params.block:
        raise ConfigurationError(f"feature length {f.shape[-1]} does not match block size {params.block}")
    v = f @ params.theta.reshape(params.n_assets, params.block).T
    if params.clip and params.feasible is not None:
        phi = np.zeros(params.n_assets) if position is None else position
        v = project_feasible(v, params.feasible, kind="speed", position=phi, dt=params.dt)
    return v


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------


class Environment(Protocol):
    dim: int

    def objective(self, theta: np.ndarray) -> np.ndarray: ...

    def gradient(self, theta: np.ndarray) -> np.ndarray: ...

    def gap(self, theta: np.ndarray) -> np.ndarray: ...


@dataclass
class QuadraticTestbed:
    """``J(theta) = -(theta - theta*)' A (theta - theta*) / 2`` with eigenvalues in ``[mu, L]``.

    ``noise_var`` is the total variance ``E||xi||^2`` of one gradient sample,
    spread evenly over coordinates.
    """

    curvatures: np.ndarray
    theta_star: np.ndarray | None = None
    noise_var: float = 0.0

    def __post_init__(self):
        self.curvatures = as_vector(self.curvatures, name="curvatures")
        if np.any(self.curvatures <= 0):
            raise ConfigurationError("curvatures must be > 0")
        p = self.curvatures.size
        self.theta_star = np.zeros(p) if self.theta_star is None else as_vector(self.theta_star, p)

    @classmethod
    def spread(cls, mu: float, L: float, dim: int, noise_var: float = 0.0, theta_star=None) -> "QuadraticTestbed":
        return cls(np.linspace(mu, L, dim), theta_star, noise_var)

    @property
    def dim(self) -> int:
        return self.curvatures.size

    @property
    def mu(self) -> float:
        return float(self.curvatures.min())

    @property
    def L(self) -> float:
        return float(self.curvatures.max())

    optimum_value = 0.0

    def gap(self, theta) -> np.ndarray:
        e = np.asarray(theta, float) - self.theta_star
        return 0.5 * (e * e) @ self.curvatures

    def objective(self, theta) -> np.ndarray:
        return -self.gap(theta)

    def gradient(self, theta) -> np.ndarray:
        return -self.curvatures * (np.asarray(theta, float) - self.theta_star)

    def sample_gradient(self, theta, rng: np.random.Generator, batch: int = 1) -> np.ndarray:
        g = self.gradient(theta)
        if self.noise_var > 0:
            g = g + rng.standard_normal(g.shape) * np.sqrt(self.noise_var / (self.dim * batch))
        return g


@dataclass
class LinearSignalEnv:
    """One-period trading on a signal: reward ``a R - c a^2 / 2`` with ``a = theta' x``.

    Features ``x ~ N(0, I)`` (or fixed at ``fixed_features``), return
    ``R = beta' x + noise_sd * z``.  The score method adds Gaussian exploration
    ``a = theta' x + explore_sd * e``.  ``J(theta) = theta' beta - c |theta|^2 / 2``
    under random features.
    """

    beta: np.ndarray
    cost: float = 1.0
    noise_sd: float = 1.0
    explore_sd: float = 0.5
    fixed_features: np.ndarray | None = None

    def __post_init__(self):
        self.beta = as_vector(self.beta, name="beta")
        check_positive(self.cost, "cost")

    @property
    def dim(self) -> int:
        return self.beta.size

    def _draw(self, rng, batch):
        p = self.dim
        if self.fixed_features is not None:
            x = np.broadcast_to(as_vector(self.fixed_features, p), (batch, p))
            z = np.zeros(batch)
        else:
            x = rng.standard_normal((batch, p))
            z = rng.standard_normal(batch)
        return x, x @ self.beta + self.noise_sd * z

    def objective(self, theta):
        th = np.asarray(theta, float)
        if self.fixed_features is not None:
            x = as_vector(self.fixed_features, self.dim)
            a = th @ x
            return a * (x @ self.beta) - 0.5 * self.cost * a**2
        return th @ self.beta - 0.5 * self.cost * np.sum(th * th, axis=-1)

    def gradient(self, theta) -> np.ndarray:
        th = np.asarray(theta, float)
        if self.fixed_features is not None:
            x = as_vector(self.fixed_features, self.dim)
            return (x @ self.beta - self.cost * (th @ x))[..., None] * x
        return self.beta - self.cost * th

    def gap(self, theta):
        return self.objective(self.beta / self.cost) - self.objective(theta)

    def sample_gradient(self, theta, rng, batch: int = 1) -> np.ndarray:
        """Pathwise batch mean for each row of ``theta`` (shape ``(..., p)``)."""
        th = np.asarray(theta, float)
        rows = th.reshape(-1, self.dim)
        out = np.stack([self.pathwise_samples(r, rng, batch).mean(axis=0) for r in rows])
        return out.reshape(th.shape)

    def pathwise_samples(self, theta, rng, batch: int) -> np.ndarray:
        x, R = self._draw(rng, batch)
        a = x @ np.asarray(theta, float)
        return (R - self.cost * a)[:, None] * x

    def score_samples(self, theta, rng, batch: int) -> np.ndarray:
        x, R = self._draw(rng, batch)
        e = rng.standard_normal(batch)
        a = x @ np.asarray(theta, float) + self.explore_sd * e
        reward = a * R - 0.5 * self.cost * a**2
        return (reward * e / self.explore_sd)[:, None] * x


def estimate_policy_gradient(params: PolicyParams | np.ndarray, environment, batch: int, method: str,
                             rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Mean gradient over a batch and the trace of its estimated covariance."""
    if batch < 1:
        raise ConfigurationError("batch must be >= 1")
    theta = params.theta if isinstance(params, PolicyParams) else np.asarray(params, float)
    if method == "pathwise":
        g = environment.pathwise_samples(theta, rng, batch)
    elif method == "score":
        g = environment.score_samples(theta, rng, batch)
    else:
        raise ConfigurationError(f"unknown gradient method {method!r}")
    var = float(np.trace(np.atleast_2d(np.cov(g, rowvar=False, ddof=1))) / batch) if batch > 1 else float("nan")
    return g.mean(axis=0), var


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    """Step schedule, preconditioner and injected noise.

    ``schedule="decreasing"`` uses ``eta_k = c / (mu (k + offset))``; the default
    offset keeps ``eta_k L`` below one from the first step.
    """

    step: float = 0.1
    schedule: str = "constant"
    decay_c: float = 1.0
    strong_concavity: float = 1.0
    offset: float | None = None
    batch_size: int = 1
    preconditioner: np.ndarray | float | None = None
    max_iter: int = 100
    n_replicas: int = 1
    divergence_guard: float = 1e6

    def __post_init__(self):
        check_positive(self.step, "step")
        if self.schedule not in ("constant", "decreasing"):
            raise ConfigurationError("schedule must be 'constant' or 'decreasing'")
        if self.batch_size < 1 or self.max_iter < 0 or self.n_replicas < 1:
            raise ConfigurationError("batch_size, n_replicas >= 1 and max_iter >= 0 required")

    def eta(self, k: int, smoothness: float | None = None) -> float:
        if self.schedule == "constant":
            return self.step
        mu = self.strong_concavity
        off = self.offset
        if off is None:
            off = np.ceil(self.decay_c * (smoothness or mu) / mu)
        return self.decay_c / (mu * (k + off))

    def precond_inverse(self, p: int) -> np.ndarray:
        if self.preconditioner is None:
            return np.eye(p)
        G = np.asarray(self.preconditioner, float)
        G = G * np.eye(p) if G.ndim == 0 else (np.diag(G) if G.ndim == 1 else G)
        check_psd(G, "preconditioner", strict=True)
        return np.linalg.inv(G)


@dataclass
class ContaminationSpec:
    """Gradient contamination ``b``: none, an additive vector/function of theta, or look-ahead.

    The look-ahead kind defers to the environment's ``contaminated_gradient``.
    """

    kind: str = "none"
    magnitude: float = 0.0
    bias: np.ndarray | Callable | None = None
    window: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "additive_bias", "lookahead"):
            raise ConfigurationError(f"unknown contamination kind {self.kind!r}")
        if self.window < 0:
            raise ConfigurationError("look-ahead window must be >= 0")

    def additive(self, theta: np.ndarray) -> np.ndarray:
        if self.kind != "additive_bias" or self.bias is None:
            return np.zeros_like(theta)
        b = self.bias(theta) if callable(self.bias) else np.broadcast_to(np.asarray(self.bias, float), theta.shape)
        return self.magnitude * np.asarray(b, float)


@dataclass
class TrainTrace:
    """Per-iteration record; arrays carry a replica axis after the iteration axis."""

    theta: np.ndarray
    gap: np.ndarray
    objective: np.ndarray
    grad_impl: np.ndarray
    grad_naive: np.ndarray
    bias: np.ndarray
    grad_var: np.ndarray
    steps: np.ndarray
    self_bias_increment: np.ndarray
    completed: int = 0
    diverged: bool = False

    @property
    def mean_gap(self) -> np.ndarray:
        return self.gap[: self.completed + 1].mean(axis=1)

    @property
    def self_bias_cum(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.self_bias_increment[: self.completed].mean(axis=1))])

    def write_csv(self, fname) -> list[str]:
        cols = ["iteration", "gap", "grad_variance", "self_bias_cum"]
        gv = np.concatenate([self.grad_var[: self.completed].mean(axis=1), [np.nan]])
        sb = self.self_bias_cum
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for k, g in enumerate(self.mean_gap):
                w.writerow([k, f"{g:.17g}", f"{gv[k]:.17g}", f"{sb[k]:.17g}"])
        return cols


def _gap_of(env, theta):
    if not hasattr(env, "gap"):
        raise ConfigurationError("environment has no computable optimum")
    return np.asarray(env.gap(theta), float)


def train(theta0, config: OptimizerConfig, environment, contamination: ContaminationSpec | None = None,
          seed: int = 0, exact: bool = False) -> TrainTrace:
    """Run ``config.max_iter`` noisy preconditioned ascent steps on ``n_replicas`` replicas.

    The environment supplies ``gradient`` (exact) and ``sample_gradient``
    (noisy).  With look-ahead contamination it must supply
    ``contaminated_gradient(theta, rng, batch) -> (g_naive, b)``.
    ``exact=True`` uses exact gradients, reducing to deterministic ascent.
    """
    contamination = contamination or ContaminationSpec()
    rng = np.random.default_rng(seed)
    R = config.n_replicas
    th0 = np.asarray(theta0, float)
    p = th0.shape[-1]
    theta = np.broadcast_to(th0, (R, p)).copy()
    Ginv = config.precond_inverse(p)
    K = config.max_iter
    L = getattr(environment, "L", None)

    tr = TrainTrace(
        theta=np.empty((K + 1, R, p)), gap=np.empty((K + 1, R)), objective=np.empty((K + 1, R)),
        grad_impl=np.empty((K, R, p)), grad_naive=np.empty((K, R, p)), bias=np.empty((K, R, p)),
        grad_var=np.empty((K, R)), steps=np.empty(K), self_bias_increment=np.empty((K, R)),
    )
    tr.theta[0] = theta
    tr.gap[0] = _gap_of(environment, theta)
    tr.objective[0] = np.asarray(environment.objective(theta), float)
    for k in range(K):
        eta = config.eta(k + 1, L)
        if contamination.kind == "lookahead":
            g_naive, b = environment.contaminated_gradient(theta, rng, config.batch_size)
        else:
            if exact:
                g_naive = environment.gradient(theta)
            else:
                g_naive = environment.sample_gradient(theta, rng, config.batch_size)
            b = contamination.additive(theta)
        g_impl = g_naive + b
        theta = _ascent_update(theta, eta, Ginv, g_impl)
        tr.grad_naive[k], tr.bias[k], tr.grad_impl[k] = g_naive, b, g_impl
        tr.grad_var[k] = np.sum((g_naive - environment.gradient(tr.theta[k])) ** 2, axis=-1)
        tr.steps[k] = eta
        tr.self_bias_increment[k] = eta * np.sum(b * g_impl, axis=-1)
        tr.theta[k + 1] = theta
        tr.gap[k + 1] = _gap_of(environment, theta)
        tr.objective[k + 1] = np.asarray(environment.objective(theta), float)
        tr.completed = k + 1
        if not np.all(np.isfinite(theta)) or np.max(np.linalg.norm(theta, axis=-1)) > config.divergence_guard:
            tr.diverged = True
            raise DivergenceError(f"parameters left the guard at iteration {k + 1}", tr)
    return tr


def _ascent_update(theta, eta, Ginv, g):
    return theta + eta * (g @ Ginv.T)


def preconditioned_ascent(theta0, step: float, n_iter: int, environment, preconditioner=None) -> np.ndarray:
    """Deterministic ascent with exact gradients; returns iterates ``(n_iter + 1, p)``."""
    th = np.asarray(theta0, float)[None, :].copy()
    p = th.shape[-1]
    cfg = OptimizerConfig(step=step, max_iter=n_iter, preconditioner=preconditioner)
    Ginv = cfg.precond_inverse(p)
    out = [th[0].copy()]
    for _ in range(n_iter):
        th = _ascent_update(th, step, Ginv, environment.gradient(th))
        out.append(th[0].copy())
    return np.array(out)


def self_bias_accumulate(trace: TrainTrace, eta=None) -> float:
    """``sum_k eta_k <b_k, g_impl_k>`` averaged over replicas."""
    K = trace.completed
    steps = trace.steps[:K] if eta is None else np.broadcast_to(np.asarray(eta, float), (K,))
    inc = np.sum(trace.bias[:K] * trace.grad_impl[:K], axis=-1)
    return float((steps[:, None] * inc).sum(axis=0).mean())


# ---------------------------------------------------------------------------
# Curve diagnostics
# ---------------------------------------------------------------------------


def fit_log_linear(x, y) -> tuple[float, float, float]:
    """Least-squares fit of ``log y`` on ``x``: returns ``(slope, intercept, R^2)``."""
    x = np.asarray(x, float)
    ly = np.log(np.asarray(y, float))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), float(r2)


def plateau_level(gaps, fraction: float = 0.2) -> float:
    """Mean over the trailing ``fraction`` of the curve."""
    g = np.asarray(gaps, float)
    n = max(1, int(np.ceil(fraction * g.size)))
    return float(g[-n:].mean())


def gap_ratio(rl_gaps, mo_gaps) -> np.ndarray:
    return np.asarray(rl_gaps, float) / np.asarray(mo_gaps, float)


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------


class PolicyGradientController(BaseEstimator):
    """Linear policy trained by stochastic gradient ascent.

    ``fit(environment)`` trains the parameters; ``predict(features)`` returns
    speeds.  The environment plays the role of the training data.
    """

    def __init__(self, n_assets: int = 1, step: float = 0.1, schedule: str = "constant", batch_size: int = 1,
                 max_iter: int = 100, preconditioner=None, method: str = "sample", seed: int = 0,
                 theta0=None):
        self.n_assets = n_assets
        self.step = step
        self.schedule = schedule
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.preconditioner = preconditioner
        self.method = method
        self.seed = seed
        self.theta0 = theta0

    def fit(self, environment, y=None, contamination: ContaminationSpec | None = None):
        cfg = OptimizerConfig(step=self.step, schedule=self.schedule, batch_size=self.batch_size,
                              max_iter=self.max_iter, preconditioner=self.preconditioner,
                              strong_concavity=getattr(environment, "mu", 1.0))
        th0 = np.zeros(environment.dim) if self.theta0 is None else np.asarray(self.theta0, float)
        self.trace_ = train(th0, cfg, environment, contamination, self.seed, exact=self.method == "exact")
        self.theta_ = self.trace_.theta[self.trace_.completed, 0].copy()
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "theta_")
        X = check_array(X, ensure_2d=True)
        params = PolicyParams(self.theta_, self.n_assets)
        return policy_action(params, features=X)
