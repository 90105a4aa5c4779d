"""Cash / mark-to-market / wealth accounting for taker and maker books.

Every field of :class:`LedgerState` may carry leading path axes; positions and
prices use the last axis for assets.  Each step books execution cash at the
fill price, re-marks the position at the prudent liquidation price, and splits
the wealth change into a mark-to-market part (position held times mark change)
and a realized part (everything else).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ._validation import check_nonnegative, check_positive
from .frictions import MakerFills

__all__ = [
    "CashRates",
    "HoldingCostModel",
    "LedgerState",
    "LedgerTrace",
    "gain_rate",
    "step_taker",
    "step_maker",
]


@dataclass(frozen=True)
class CashRates:
    credit: float = 0.0
    funding: float = 0.0
    tax: float = 0.0

    def __post_init__(self):
        check_nonnegative([self.credit, self.funding, self.tax], "cash rates")

    def carry(self, cash) -> np.ndarray:
        cash = np.asarray(cash, float)
        return self.credit * np.maximum(cash, 0.0) - self.funding * np.maximum(-cash, 0.0)


@dataclass(frozen=True)
class HoldingCostModel:
    """``HC = lend * phi^- + hold * |phi| + quad/2 * phi^2 + zeta * (Margin - FreeCash)^+``.

    ``Margin`` defaults to ``margin_rate * ||phi||_1`` and ``FreeCash`` to the
    positive part of cash.
    """

    lend: float = 0.0
    hold: float = 0.0
    quad: float = 0.0
    margin_penalty: float = 0.0
    margin_rate: float = 0.0
    margin: Callable[[np.ndarray], np.ndarray] | None = None
    free_cash: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        check_nonnegative([self.lend, self.hold, self.quad, self.margin_penalty, self.margin_rate],
                          "holding-cost rates")

    def margin_of(self, position) -> np.ndarray:
        phi = np.asarray(position, float)
        if self.margin is not None:
            return np.asarray(self.margin(phi), float)
        return self.margin_rate * np.abs(phi).sum(axis=-1)

    def free_cash_of(self, cash) -> np.ndarray:
        cash = np.asarray(cash, float)
        if self.free_cash is not None:
            return np.asarray(self.free_cash(cash), float)
        return np.maximum(cash, 0.0)

    def __call__(self, position, cash=0.0) -> np.ndarray:
        phi = np.asarray(position, float)
        cost = (self.lend * np.maximum(-phi, 0.0) + self.hold * np.abs(phi)
                + 0.5 * self.quad * phi**2).sum(axis=-1)
        if self.margin_penalty:
            cost = cost + self.margin_penalty * np.maximum(self.margin_of(phi) - self.free_cash_of(cash), 0.0)
        return cost

    def gradient(self, position, cash=0.0) -> np.ndarray:
        """A subgradient in the position (sign(0) = 0 at kinks)."""
        phi = np.asarray(position, float)
        g = -self.lend * (phi < 0) + self.hold * np.sign(phi) + self.quad * phi
        if self.margin_penalty and self.margin is None:
            breach = (self.margin_of(phi) - self.free_cash_of(cash)) > 0
            g = g + self.margin_penalty * self.margin_rate * np.sign(phi) * np.asarray(breach)[..., None]
        return g


@dataclass
class LedgerState:
    cash: np.ndarray
    value: np.ndarray
    wealth: np.ndarray
    position: np.ndarray
    mark: np.ndarray
    realized_cum: np.ndarray
    mtm_cum: np.ndarray
    jump_cross_cum: np.ndarray = field(default=None)
    margin_breach: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, position, mark, cash=0.0) -> "LedgerState":
        phi = np.array(position, dtype=float)
        mark = np.broadcast_to(np.asarray(mark, float), phi.shape).copy()
        cash = np.broadcast_to(np.asarray(cash, float), phi.shape[:-1]).astype(float)
        value = (phi * mark).sum(axis=-1)
        zeros = np.zeros_like(value)
        return cls(cash, value, value + cash, phi, mark, zeros.copy(), zeros.copy(), zeros.copy(),
                   np.zeros(value.shape, dtype=bool))


def gain_rate(ledger: LedgerState, rates: CashRates, hc: HoldingCostModel, exec_price, speed, mid,
              hc_position=None) -> np.ndarray:
    """Cash gain rate of continuous taker trading."""
    speed = np.asarray(speed, float)
    pay = (np.asarray(exec_price, float) * speed).sum(axis=-1)
    tax = rates.tax * (np.asarray(mid, float) * np.abs(speed)).sum(axis=-1)
    held = ledger.position if hc_position is None else hc_position
    return -pay - hc(held, ledger.cash) + rates.carry(ledger.cash) - tax


def step_taker(ledger: LedgerState, rates: CashRates, hc: HoldingCostModel, p_liq, p_liq_prev,
               exec_price, speed, mid, dt: float, hc_on: str = "pre") -> LedgerState:
    """Advance a taker book by one step of length ``dt``.

    ``p_liq`` is the new mark (after the trade); ``p_liq_prev`` the mark the
    current value was computed with, defaulting to the stored mark.  Holding
    cost is charged on the position before (``hc_on="pre"``) or after
    (``"post"``) the trade.
    """
    if hc_on not in ("pre", "post"):
        raise ValueError("hc_on must be 'pre' or 'post'")
    check_positive(dt, "dt")
    speed = np.asarray(speed, float)
    p_liq = np.asarray(p_liq, float)
    p_prev = ledger.mark if p_liq_prev is None else np.asarray(p_liq_prev, float)
    exec_price = np.asarray(exec_price, float)

    d_phi = speed * dt
    held = ledger.position if hc_on == "pre" else ledger.position + d_phi
    G = gain_rate(ledger, rates, hc, exec_price, speed, mid, hc_position=held)
    cash = ledger.cash + G * dt
    phi = ledger.position + d_phi
    value = (phi * p_liq).sum(axis=-1)

    mtm = (ledger.position * (p_liq - p_prev)).sum(axis=-1)
    costs = hc(held, ledger.cash) - rates.carry(ledger.cash) \
        + rates.tax * (np.asarray(mid, float) * np.abs(speed)).sum(axis=-1)
    realized = ((p_liq - exec_price) * d_phi).sum(axis=-1) - costs * dt

    return LedgerState(
        cash=cash,
        value=value,
        wealth=value + cash,
        position=phi,
        mark=p_liq,
        realized_cum=ledger.realized_cum + realized,
        mtm_cum=ledger.mtm_cum + mtm,
        jump_cross_cum=ledger.jump_cross_cum,
        margin_breach=np.asarray(hc.margin_of(phi) > hc.free_cash_of(cash)),
    )


def step_maker(ledger: LedgerState, rates: CashRates, hc: HoldingCostModel, p_liq, fills: MakerFills,
               dt: float, apply_tax: bool = False, mid=None, p_liq_prev=None) -> LedgerState:
    """Advance a maker book by one step given Poisson fills.

    Ask fills sell at ``a`` (cash in), bid fills buy at ``b`` (cash out).  The
    mark-to-market part includes the jump cross-term ``d_phi * d_P_liq``.
    """
    check_positive(dt, "dt")
    p_liq = np.asarray(p_liq, float)
    p_prev = ledger.mark if p_liq_prev is None else np.asarray(p_liq_prev, float)
    n_bid = np.asarray(fills.n_bid, float)
    n_ask = np.asarray(fills.n_ask, float)
    d_phi = n_bid - n_ask

    d_cash = (fills.ask_price * n_ask - fills.bid_price * n_bid).sum(axis=-1)
    d_cash = d_cash + (rates.carry(ledger.cash) - hc(ledger.position, ledger.cash)) * dt
    if apply_tax:
        m = 0.5 * (fills.ask_price + fills.bid_price) if mid is None else np.asarray(mid, float)
        d_cash = d_cash - rates.tax * (m * (n_bid + n_ask)).sum(axis=-1)

    phi = ledger.position + d_phi
    cash = ledger.cash + d_cash
    value = (phi * p_liq).sum(axis=-1)
    d_mark = p_liq - p_prev
    cross = (d_phi * d_mark).sum(axis=-1)
    mtm = (ledger.position * d_mark).sum(axis=-1) + cross
    realized = (p_prev * d_phi).sum(axis=-1) + d_cash

    return LedgerState(
        cash=cash,
        value=value,
        wealth=value + cash,
        position=phi,
        mark=p_liq,
        realized_cum=ledger.realized_cum + realized,
        mtm_cum=ledger.mtm_cum + mtm,
        jump_cross_cum=ledger.jump_cross_cum + cross,
        margin_breach=np.asarray(hc.margin_of(phi) > hc.free_cash_of(cash)),
    )


class LedgerTrace:
    """Append-only per-step record of ledger states for CSV export."""

    def __init__(self):
        self.times: list[float] = []
        self.states: list[LedgerState] = []

    def record(self, t: float, state: LedgerState) -> None:
        self.times.append(float(t))
        self.states.append(replace(state))

    def columns(self, n_assets: int) -> list[str]:
        return ["path", "time", "B", "V", "X"] + [f"phi_{i}" for i in range(n_assets)] + ["realized", "mtm"]

    def rows(self, path: int | None = None):
        for t, s in zip(self.times, self.states):
            sel = (lambda a: np.asarray(a)) if path is None else (lambda a: np.asarray(a)[path])
            phi = np.atleast_1d(sel(s.position))
            yield [t, float(sel(s.cash)), float(sel(s.value)), float(sel(s.wealth)),
                   *map(float, phi), float(sel(s.realized_cum)), float(sel(s.mtm_cum))]

    def write_csv(self, fname, paths=(None,), path_labels=None) -> list[str]:
        n_assets = np.atleast_1d(np.asarray(self.states[0].position)[paths[0]] if paths[0] is not None
                                 else self.states[0].position).shape[-1]
        cols = self.columns(n_assets)
        labels = path_labels or [0 if p is None else p for p in paths]
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for p, label in zip(paths, labels):
                for row in self.rows(p):
                    w.writerow([label] + [f"{v:.17g}" for v in row])
        return cols
