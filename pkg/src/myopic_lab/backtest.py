"""Vectorized paired backtests for the MO-vs-RL dominance experiments.

Both books run through the ledger.  MO and RL share Brownian increments and,
in maker mode, the uniforms behind the Poisson fills, so differences between
them come from the perturbation alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .frictions import MakerModel, sample_maker_fills
from .ledger import CashRates, HoldingCostModel, LedgerState, step_maker, step_taker
from .pnl import PerturbationSpec
from .rl import OptimizerConfig, train
from .sde import brownian_increments

__all__ = [
    "TakerScenario",
    "MakerScenario",
    "ConstantPositionEnv",
    "run_taker_pair",
    "run_maker_pair",
    "train_constant_policies",
    "run_taker_trained",
]


@dataclass(frozen=True)
class TakerScenario:
    """``dP = l dt + sigma dB`` with quadratic holding cost ``q phi^2 / 2``; MO holds ``l / q``."""

    drift: float = 0.5
    sigma: float = 1.0
    quad_cost: float = 1.0
    horizon: float = 1.0
    n_steps: int = 100
    mid0: float = 100.0

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @property
    def mo_position(self) -> float:
        return self.drift / self.quad_cost

    @property
    def curvature(self) -> float:
        """Strong concavity of the reduced Hamiltonian in the exposure ``u = sigma phi``."""
        return self.quad_cost / self.sigma**2


@dataclass(frozen=True)
class MakerScenario:
    """Symmetric quoting at ``delta`` on each side with fill rate ``Lambda exp(-k delta)``."""

    base_intensity: float = 50.0
    decay: float = 10.0
    sigma: float = 1.0
    horizon: float = 1.0
    n_steps: int = 100
    mid0: float = 100.0

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @property
    def mo_offset(self) -> float:
        return 1.0 / self.decay

    @property
    def curvature(self) -> float:
        """``-d^2/d delta^2`` of ``delta Lambda exp(-k delta)`` at the optimum, per side."""
        return self.base_intensity * self.decay * np.exp(-1.0)


def _taker_book(positions, dP, scenario: TakerScenario, prices):
    """Ledger run holding ``positions[:, k]`` over step ``k``; returns terminal wealth change."""
    n, K = positions.shape
    h = scenario.step
    hc = HoldingCostModel(quad=scenario.quad_cost)
    rates = CashRates()
    prev = np.full((n, 1), scenario.mo_position)
    led = LedgerState.initial(prev, prices[:, :1])
    x0 = led.wealth.copy()
    for k in range(K):
        target = positions[:, k:k + 1]
        speed = (target - led.position) / h
        p_now = prices[:, k:k + 1]
        p_next = prices[:, k + 1:k + 2]
        led = step_taker(led, rates, hc, p_next, p_now, p_now, speed, p_now, h, hc_on="post")
    return led.wealth - x0


def run_taker_pair(scenario: TakerScenario, perturbation: PerturbationSpec, n_paths: int, seed: int,
                   path_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Terminal PnL of MO (hold ``l/q``) and RL (``l/q`` plus exposure noise) on shared paths."""
    if perturbation.dim != 1:
        raise ConfigurationError("taker scenario is one-dimensional")
    K, h = scenario.n_steps, scenario.step
    idx = np.arange(path_offset, path_offset + n_paths)
    dB = brownian_increments(seed, idx, K, 1, h)[..., 0]
    dP = scenario.drift * h + scenario.sigma * dB
    prices = scenario.mid0 + np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dP, axis=1)], axis=1)
    rng = np.random.default_rng([seed, 1])
    eps = perturbation.sample(rng, n_paths, K)[..., 0] / scenario.sigma
    mo = np.full((n_paths, K), scenario.mo_position)
    return _taker_book(mo, dP, scenario, prices), _taker_book(mo + eps, dP, scenario, prices)


def _maker_book(offsets, dB, scenario: MakerScenario, seed: int):
    """Ledger run quoting ``offsets[:, k, (bid, ask)]``; fills use step-keyed uniforms."""
    n, K = dB.shape
    h = scenario.step
    model = MakerModel(scenario.base_intensity, scenario.base_intensity, scenario.decay, scenario.decay)
    hc = HoldingCostModel()
    rates = CashRates()
    mid = np.full((n, 1), scenario.mid0)
    led = LedgerState.initial(np.zeros((n, 1)), mid)
    for k in range(K):
        rng = np.random.default_rng([seed, 2, k])
        quotes = (-offsets[:, k, 0:1], offsets[:, k, 1:2])
        fills = sample_maker_fills(model, quotes, mid, h, rng)
        new_mid = mid + scenario.sigma * dB[:, k:k + 1]
        led = step_maker(led, rates, hc, new_mid, fills, h)
        mid = new_mid
    return led.wealth


def run_maker_pair(scenario: MakerScenario, perturbation: PerturbationSpec, n_paths: int, seed: int,
                   path_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Terminal PnL of MO quoting ``1/k`` and RL quoting ``1/k + eps`` (clipped at 0) per side."""
    if perturbation.dim != 2:
        raise ConfigurationError("maker perturbation must have dim 2 (bid, ask)")
    K, h = scenario.n_steps, scenario.step
    idx = np.arange(path_offset, path_offset + n_paths)
    dB = brownian_increments(seed, idx, K, 1, h)[..., 0]
    rng = np.random.default_rng([seed, 1])
    eps = perturbation.sample(rng, n_paths, K)
    mo = np.full((n_paths, K, 2), scenario.mo_offset)
    rl = np.maximum(mo + eps, 0.0)
    return _maker_book(mo, dB, scenario, seed), _maker_book(rl, dB, scenario, seed)


@dataclass
class ConstantPositionEnv:
    """Learn a constant position from simulated one-step returns.

    A sample gradient of ``J(theta) = E[theta dP - q theta^2 dt / 2] / dt``
    is ``dP / dt - q theta`` with ``dP`` over a step of length ``sample_dt``.
    """

    scenario: TakerScenario
    sample_dt: float = 1.0
    dim: int = 1

    @property
    def mu(self) -> float:
        return self.scenario.quad_cost

    @property
    def L(self) -> float:
        return self.scenario.quad_cost

    def objective(self, theta):
        th = np.asarray(theta, float)[..., 0]
        return th * self.scenario.drift - 0.5 * self.scenario.quad_cost * th**2

    def gradient(self, theta):
        th = np.asarray(theta, float)
        return self.scenario.drift - self.scenario.quad_cost * th

    def gap(self, theta):
        return self.objective(np.array([self.scenario.mo_position])) - self.objective(theta)

    def sample_gradient(self, theta, rng, batch: int = 1):
        th = np.asarray(theta, float)
        dP = self.scenario.drift * self.sample_dt + self.scenario.sigma * np.sqrt(self.sample_dt) * \
            rng.standard_normal(th.shape[:-1] + (batch,)).mean(axis=-1, keepdims=True)
        return dP / self.sample_dt - self.scenario.quad_cost * th


def train_constant_policies(scenario: TakerScenario, n_runs: int, step: float = 0.2, n_iter: int = 200,
                            batch: int = 1, seed: int = 0, theta0: float = 0.0) -> np.ndarray:
    """Final parameters of ``n_runs`` independent SGD runs (trained as replicas)."""
    env = ConstantPositionEnv(scenario)
    cfg = OptimizerConfig(step=step, max_iter=n_iter, batch_size=batch, n_replicas=n_runs)
    tr = train(np.array([theta0]), cfg, env, seed=seed)
    return tr.theta[tr.completed, :, 0]


def run_taker_trained(scenario: TakerScenario, thetas: np.ndarray, n_paths: int, seed: int
                      ) -> tuple[np.ndarray, np.ndarray, float]:
    """MO vs trained constant positions (path ``i`` uses run ``i mod n_runs``).

    Returns ``(mo, rl, floor)`` with ``floor = E||u_RL - u_MO||^2`` including bias.
    """
    K, h = scenario.n_steps, scenario.step
    idx = np.arange(n_paths)
    dB = brownian_increments(seed, idx, K, 1, h)[..., 0]
    dP = scenario.drift * h + scenario.sigma * dB
    prices = scenario.mid0 + np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dP, axis=1)], axis=1)
    th = np.asarray(thetas, float)[idx % len(thetas)]
    mo = np.full((n_paths, K), scenario.mo_position)
    rl = np.repeat(th[:, None], K, axis=1)
    floor = float(np.mean((scenario.sigma * (np.asarray(thetas) - scenario.mo_position)) ** 2))
    return _taker_book(mo, dP, scenario, prices), _taker_book(rl, dP, scenario, prices), floor
