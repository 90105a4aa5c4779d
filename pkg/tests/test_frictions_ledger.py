import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from myopic_lab.exceptions import ConfigurationError, DepthExhaustionError
from myopic_lab.frictions import (LiquidationModel, MakerFills, MakerModel, TakerModel, TradeHistory,
                                  exec_price_taker, exponential_kernel, liq_price, maker_intensity,
                                  sample_maker_fills)
from myopic_lab.ledger import (CashRates, HoldingCostModel, LedgerState, LedgerTrace, gain_rate, step_maker,
                               step_taker)


@pytest.mark.parametrize("v, expected", [(2.0, 100.25), (-2.0, 99.75), (0.0, 100.0)])
def test_taker_price_hand_computed(v, expected):
    model = TakerModel(1, half_spread=0.05, temp_impact=0.1)
    assert exec_price_taker(model, [100.0], [v])[0] == pytest.approx(expected, abs=1e-12)


def test_overflow_premium_and_depth_exhaustion():
    model = TakerModel(1, temp_impact=0.0, overflow_coef=2.0, depth=10.0)
    # 2 * (5 / 10)^2 on top of the mid.
    assert exec_price_taker(model, [50.0], [1.0], q=[5.0])[0] == pytest.approx(50.5)
    with pytest.raises(DepthExhaustionError):
        exec_price_taker(TakerModel(1, depth=0.0), [50.0], [1.0], q=[1.0])


def test_transient_impact_constant_speed():
    # int_0^tau c exp(-r u) v du = c v (1 - exp(-r tau)) / r
    r, c, v, tau, h = 2.0, 0.5, 3.0, 1.0, 1e-3
    hist = TradeHistory(tau, h)
    for k in range(int(round(tau / h)) + 1):
        hist.push(k * h, [v])
    model = TakerModel(1, temp_impact=0.0, kernel=exponential_kernel(r, c), tau_fill=tau)
    got = exec_price_taker(model, [0.0], [v], history=hist)[0]
    assert got == pytest.approx(c * v * (1 - np.exp(-r * tau)) / r, rel=1e-6)


def test_history_drops_old_entries_and_rejects_disorder():
    hist = TradeHistory(0.2, 0.1)
    for t in (0.0, 0.1, 0.2, 0.3):
        hist.push(t, [1.0])
    assert len(hist) == 3 and hist.span == pytest.approx(0.2)
    with pytest.raises(ConfigurationError):
        hist.push(0.1, [1.0])


def test_liquidation_mark_is_on_exit_side():
    model = LiquidationModel(adv=100.0, discount_coef=1.0)
    marks = liq_price(model, [[100.0], [100.0], [100.0]], [[10.0], [-10.0], [0.0]], half_spread=0.05)
    # 0.05 + 1 * 10/100 per unit away from the mid.
    np.testing.assert_allclose(marks[:, 0], [99.85, 100.15, 100.0])


def test_maker_intensity_and_mean_fills(rng):
    model = MakerModel(50.0, 50.0, 10.0, 10.0)
    lam = maker_intensity(50.0, 10.0, 0.1)
    assert lam == pytest.approx(50 * np.exp(-1))
    fills = sample_maker_fills(model, (np.full((20000, 1), -0.1), np.full((20000, 1), 0.1)), np.full((20000, 1), 100.0),
                               0.01, rng)
    assert fills.n_bid.mean() == pytest.approx(lam * 0.01, abs=4 * np.sqrt(lam * 0.01 / 20000))
    assert np.all(fills.ask_price == 100.1) and np.all(fills.bid_price == 99.9)


@given(st.integers(0, 2**32), st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_maker_fills_monotone_in_offset_under_shared_uniforms(seed, near, extra):
    model = MakerModel(50.0, 50.0, 10.0, 10.0)
    mid = np.full((200, 1), 100.0)
    a = sample_maker_fills(model, (-near, near), mid, 0.05, np.random.default_rng(seed))
    b = sample_maker_fills(model, (-(near + extra), near + extra), mid, 0.05, np.random.default_rng(seed))
    assert np.all(b.n_bid <= a.n_bid) and np.all(b.n_ask <= a.n_ask)


def test_maker_rejects_crossed_quotes(rng):
    with pytest.raises(ConfigurationError):
        sample_maker_fills(MakerModel(), (0.1, 0.1), [100.0], 0.1, rng)


def test_holding_cost_and_carry():
    hc = HoldingCostModel(lend=0.1, hold=0.01, quad=2.0)
    # short 2: lend 0.2 + hold 0.02 + quad 4
    assert hc([-2.0]) == pytest.approx(4.22)
    np.testing.assert_allclose(hc.gradient([-2.0]), [-0.1 - 0.01 - 4.0])
    rates = CashRates(credit=0.05, funding=0.1)
    np.testing.assert_allclose(rates.carry([100.0, -100.0]), [5.0, -10.0])


def test_margin_breach_flag():
    hc = HoldingCostModel(margin_penalty=1.0, margin_rate=0.5)
    assert hc([4.0], cash=1.0) == pytest.approx(1.0)
    led = LedgerState.initial([[0.0]], [[10.0]], cash=[1.0])
    out = step_taker(led, CashRates(), hc, [[10.0]], None, [[10.0]], [[4.0]], [[10.0]], 1.0)
    assert bool(out.margin_breach[0])


def test_taker_step_hand_computed():
    led = LedgerState.initial([[0.0]], [[100.0]])
    out = step_taker(led, CashRates(), HoldingCostModel(), [[100.5]], None, [[101.0]], [[1.0]], [[100.0]], 1.0)
    assert out.cash[0] == pytest.approx(-101.0)
    assert out.value[0] == pytest.approx(100.5)
    assert out.wealth[0] == pytest.approx(-0.5)
    assert out.realized_cum[0] == pytest.approx(-0.5)
    assert out.mtm_cum[0] == 0.0


def test_holding_cost_timing():
    led = LedgerState.initial([[1.0]], [[10.0]])
    hc = HoldingCostModel(quad=2.0)
    args = (CashRates(), hc, [[10.0]], None, [[10.0]], [[1.0]], [[10.0]], 1.0)
    pre = step_taker(led, *args, hc_on="pre")
    post = step_taker(led, *args, hc_on="post")
    # quad/2 * phi^2 on phi = 1 before and phi = 2 after the trade.
    assert pre.cash[0] == pytest.approx(-10.0 - 1.0)
    assert post.cash[0] == pytest.approx(-10.0 - 4.0)
    assert gain_rate(led, CashRates(), hc, [[10.0]], [[1.0]], [[10.0]])[0] == pytest.approx(-11.0)


def test_maker_step_cash_signs():
    led = LedgerState.initial([[0.0]], [[100.0]])
    fills = MakerFills(np.array([[0.0]]), np.array([[1.0]]), np.array([[100.1]]), np.array([[99.9]]),
                       np.array([[1.0]]), np.array([[1.0]]))
    out = step_maker(led, CashRates(), HoldingCostModel(), [[100.0]], fills, 0.1)
    assert out.cash[0] == pytest.approx(100.1)
    assert out.position[0, 0] == -1.0
    assert out.wealth[0] == pytest.approx(0.1)


@given(st.integers(0, 2**32))
def test_wealth_splits_into_realized_plus_mtm(seed):
    r = np.random.default_rng(seed)
    n, K = 5, 20
    rates = CashRates(credit=0.01, funding=0.03, tax=0.001)
    hc = HoldingCostModel(lend=0.02, hold=0.01, quad=0.1)
    prices = 100 + np.cumsum(r.standard_normal((n, K + 1, 1)), axis=1)
    led = LedgerState.initial(np.zeros((n, 1)), prices[:, 0])
    x0 = led.wealth.copy()
    for k in range(K):
        v = r.standard_normal((n, 1))
        led = step_taker(led, rates, hc, prices[:, k + 1], None, prices[:, k] + 0.1 * v, v, prices[:, k], 0.1)
    np.testing.assert_allclose(led.wealth - x0, led.realized_cum + led.mtm_cum, atol=1e-9)

    mid = np.full((n, 1), 100.0)
    led = LedgerState.initial(np.zeros((n, 1)), mid)
    model = MakerModel(20.0, 20.0, 5.0, 5.0)
    for k in range(K):
        fills = sample_maker_fills(model, (-0.1, 0.1), mid, 0.1, r)
        new = mid + r.standard_normal((n, 1))
        led = step_maker(led, rates, hc, new, fills, 0.1, apply_tax=True)
        mid = new
    np.testing.assert_allclose(led.wealth, led.realized_cum + led.mtm_cum, atol=1e-9)


def test_trace_csv_roundtrip(tmp_path):
    tr = LedgerTrace()
    led = LedgerState.initial([[0.0], [1.0]], [[100.0], [100.0]])
    tr.record(0.0, led)
    led = step_taker(led, CashRates(), HoldingCostModel(), [[101.0], [101.0]], None, [[100.0], [100.0]],
                     [[1.0], [0.0]], [[100.0], [100.0]], 1.0)
    tr.record(1.0, led)
    cols = tr.write_csv(tmp_path / "l.csv", paths=(0, 1))
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0].split(",") == cols and len(lines) == 5
