"""Execution and liquidation operators.

Taker orders pay half-spread, temporary impact, transient impact (a kernel
convolution over recent trading speed) and a depth-overflow premium.  Maker
quotes fill as Poisson processes with intensity decaying exponentially in
quote distance.  Positions are marked at a prudent exit price.

All operators broadcast over leading axes so one call can serve many paths;
the last axis always indexes assets.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from ._validation import as_matrix, check_positive, check_psd
from .exceptions import ConfigurationError, DepthExhaustionError

__all__ = [
    "TakerModel",
    "MakerModel",
    "LiquidationModel",
    "TradeHistory",
    "MakerFills",
    "exec_price_taker",
    "maker_intensity",
    "sample_maker_fills",
    "liq_price",
    "exponential_kernel",
]

PriceFn = Callable[[np.ndarray], np.ndarray]


def _mid(state, n_assets: int, fn: PriceFn | None) -> np.ndarray:
    state = np.asarray(state, float)
    if fn is not None:
        return np.asarray(fn(state), float)
    return state[..., :n_assets]


def _value(v, state):
    return np.asarray(v(state) if callable(v) else v, float)


def exponential_kernel(rate: float = 1.0, scale: float = 1.0) -> Callable[[float], float]:
    """Scalar kernel ``scale * exp(-rate * lag)``."""
    return lambda lag: scale * np.exp(-rate * np.asarray(lag, float))


@dataclass
class TakerModel:
    """Taker execution parameters for ``N`` assets.

    ``mid``, ``half_spread`` and ``depth`` may be constants or functions of the
    market state; with ``mid=None`` the first ``N`` state components are the
    mid prices.  ``kernel(lag)`` returns a scalar or an ``N x N`` matrix.
    """

    n_assets: int = 1
    half_spread: float | PriceFn = 0.0
    temp_impact: np.ndarray | float = 0.0
    kernel: Callable | None = None
    tau_fill: float = 0.0
    overflow: Callable[[np.ndarray], np.ndarray] | None = None
    overflow_coef: float = 0.0
    depth: float | PriceFn = np.inf
    mid: PriceFn | None = None

    def __post_init__(self):
        self.temp_impact = as_matrix(self.temp_impact, self.n_assets, "temp_impact")
        check_psd(0.5 * (self.temp_impact + self.temp_impact.T), "temp_impact")
        if self.tau_fill < 0:
            raise ConfigurationError("tau_fill must be nonnegative")
        if self.overflow_coef < 0:
            raise ConfigurationError("overflow_coef must be nonnegative")

    def overflow_premium(self, ratio: np.ndarray) -> np.ndarray:
        if self.overflow is not None:
            return np.asarray(self.overflow(ratio), float)
        return self.overflow_coef * ratio**2


@dataclass
class MakerModel:
    """Exponential fill intensities ``Lambda * exp(-k |delta|)`` per side."""

    base_intensity_bid: float = 1.0
    base_intensity_ask: float = 1.0
    decay_bid: float = 1.0
    decay_ask: float = 1.0
    delta_low: float = 0.0
    delta_high: float = np.inf
    n_assets: int = 1
    mid: PriceFn | None = None

    def __post_init__(self):
        for name in ("base_intensity_bid", "base_intensity_ask", "decay_bid", "decay_ask"):
            check_positive(getattr(self, name), name)
        if not 0 <= self.delta_low <= self.delta_high:
            raise ConfigurationError("need 0 <= delta_low <= delta_high")


@dataclass
class LiquidationModel:
    """Prudent exit mark: half-spread plus a block discount ``H(|phi|/ADV, tau)``."""

    adv: float = np.inf
    tau_liq: float = 1.0
    discount_coef: float = 0.0
    discount: Callable[[np.ndarray, float], np.ndarray] | None = None
    n_assets: int = 1
    mid: PriceFn | None = None

    def __post_init__(self):
        check_positive(self.adv, "adv")
        check_positive(self.tau_liq, "tau_liq")
        if self.discount_coef < 0:
            raise ConfigurationError("discount_coef must be nonnegative")

    def block_discount(self, ratio: np.ndarray) -> np.ndarray:
        if self.discount is not None:
            return np.asarray(self.discount(ratio, self.tau_liq), float)
        return self.discount_coef * ratio / math.sqrt(self.tau_liq)


class TradeHistory:
    """Ring buffer of ``(time, speed)`` covering the last ``tau_fill`` of trading.

    Speeds may carry leading path axes, e.g. shape ``(n_paths, N)``.
    """

    def __init__(self, tau_fill: float, step: float):
        if tau_fill < 0:
            raise ConfigurationError("tau_fill must be nonnegative")
        self.tau_fill = float(tau_fill)
        self.step = check_positive(step, "step")
        self.maxlen = int(math.ceil(self.tau_fill / self.step - 1e-12)) + 1
        self._buf: deque[tuple[float, np.ndarray]] = deque(maxlen=self.maxlen)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, t: float, speed) -> None:
        if self._buf and t < self._buf[-1][0]:
            raise ConfigurationError("history entries must be time-ordered")
        self._buf.append((float(t), np.array(speed, dtype=float)))
        tol = 1e-9 * max(1.0, self.tau_fill)
        while self._buf and t - self._buf[0][0] > self.tau_fill + tol:
            self._buf.popleft()

    @property
    def span(self) -> float:
        return self._buf[-1][0] - self._buf[0][0] if len(self._buf) > 1 else 0.0

    def transient(self, kernel: Callable | None, t: float | None = None) -> np.ndarray | float:
        """Trapezoid estimate of ``int K(t - u) speed_u du`` over the stored window."""
        if kernel is None or len(self._buf) < 2:
            if self._buf:
                return np.zeros_like(self._buf[-1][1])
            return 0.0
        t = self._buf[-1][0] if t is None else float(t)
        vals = []
        times = []
        for u, v in self._buf:
            K = np.asarray(kernel(t - u), float)
            vals.append(K * v if K.ndim == 0 else v @ K.T)
            times.append(u)
        total = np.zeros_like(vals[0])
        for i in range(len(vals) - 1):
            total = total + 0.5 * (times[i + 1] - times[i]) * (vals[i] + vals[i + 1])
        return total


def exec_price_taker(model: TakerModel, state, speed, q=None, history: TradeHistory | None = None,
                     t: float | None = None) -> np.ndarray:
    """Executable taker price ``m + s sgn(v) + Xi v + (K * v) + g(|q|/D)``.

    The transient term integrates whatever is in ``history``; push the current
    speed first if it should count.
    """
    speed = np.asarray(speed, float)
    m = _mid(state, model.n_assets, model.mid)
    s = _value(model.half_spread, state)
    price = m + s * np.sign(speed) + speed @ model.temp_impact.T
    if history is not None:
        if history.span > history.tau_fill + 1e-9 * max(1.0, history.tau_fill):
            raise ConfigurationError("history span exceeds tau_fill")
        price = price + history.transient(model.kernel, t)
    if q is not None:
        q = np.asarray(q, float)
        D = np.broadcast_to(_value(model.depth, state), np.broadcast_shapes(np.shape(q), np.shape(_value(model.depth, state))))
        absq = np.abs(q)
        if np.any((D == 0) & (absq != 0)):
            raise DepthExhaustionError("order sent into zero depth")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(absq == 0, 0.0, absq / D)
        price = price + model.overflow_premium(ratio)
    return price


def maker_intensity(base: float, decay: float, delta) -> np.ndarray:
    """Fill intensity ``base * exp(-decay * |delta|)``."""
    return base * np.exp(-decay * np.abs(np.asarray(delta, float)))


@dataclass(frozen=True)
class MakerFills:
    n_bid: np.ndarray
    n_ask: np.ndarray
    ask_price: np.ndarray
    bid_price: np.ndarray
    intensity_bid: np.ndarray
    intensity_ask: np.ndarray


def sample_maker_fills(model: MakerModel, quotes, state, dt: float, rng: np.random.Generator) -> MakerFills:
    """Poisson fill counts for one step.

    ``quotes = (delta_bid, delta_ask)`` with ``delta_bid <= 0 <= delta_ask``.
    Counts use inverse-CDF sampling from uniforms, so two strategies fed the
    same generator state get coupled fills.
    """
    check_positive(dt, "dt")
    d_bid = np.asarray(quotes[0], float)
    d_ask = np.asarray(quotes[1], float)
    if np.any(d_bid > 0) or np.any(d_ask < 0):
        raise ConfigurationError("need delta_bid <= 0 <= delta_ask")
    tol = 1e-12
    for dist in (np.abs(d_bid), d_ask):
        if np.any(dist < model.delta_low - tol) or np.any(dist > model.delta_high + tol):
            raise ConfigurationError("quote offsets outside [delta_low, delta_high]")
    m = _mid(state, model.n_assets, model.mid)
    lam_b = maker_intensity(model.base_intensity_bid, model.decay_bid, d_bid)
    lam_a = maker_intensity(model.base_intensity_ask, model.decay_ask, d_ask)
    shape = np.broadcast_shapes(m.shape, lam_b.shape, lam_a.shape)
    u = rng.random((2,) + shape)
    n_bid = stats.poisson.ppf(u[0], np.broadcast_to(lam_b * dt, shape)).astype(float)
    n_ask = stats.poisson.ppf(u[1], np.broadcast_to(lam_a * dt, shape)).astype(float)
    return MakerFills(n_bid, n_ask, m + d_ask, m + d_bid,
                      np.broadcast_to(lam_b, shape), np.broadcast_to(lam_a, shape))


def liq_price(model: LiquidationModel, state, position, half_spread=0.0) -> np.ndarray:
    """Prudent mark ``m - sgn(phi) (s + H(|phi|/ADV, tau_liq))``.

    Longs are marked down and shorts up, so the mark is always on the exit side.
    """
    phi = np.asarray(position, float)
    m = _mid(state, model.n_assets, model.mid)
    s = _value(half_spread, state)
    H = model.block_discount(np.abs(phi) / model.adv)
    return m - np.sign(phi) * (s + H)
