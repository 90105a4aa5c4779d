import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from myopic_lab.backtest import (ConstantPositionEnv, MakerScenario, TakerScenario, run_maker_pair,
                                 run_taker_pair, run_taker_trained, train_constant_policies)
from myopic_lab.exceptions import ConfigurationError
from myopic_lab.ledger import CashRates, HoldingCostModel
from myopic_lab.mo import SeparableGain, myopic_step
from myopic_lab.pnl import (PerturbationSpec, ReducedHamiltonianInput, distribution_features, dominance_report,
                            hamiltonian_action_gradient, kappa_correction, pitman_morgan, reduced_hamiltonian,
                            semimartingale_split)
from myopic_lab.sde import arithmetic_brownian


def test_reduced_hamiltonian_taker_hand_computed():
    inp = ReducedHamiltonianInput("taker", [2.0], [0.1], [[1.0]], kappa=0.4, liq_price=[99.9], exec_price=[100.2],
                                  speed=[1.0], mid=[100.0], cash=10.0, rates=CashRates(credit=0.01, tax=0.001),
                                  holding_cost=HoldingCostModel(quad=0.5))
    # 0.2 + 0.2 - 1.0 + 0.1 + (99.9 - 100.2) * 1 - 0.001 * 100
    assert reduced_hamiltonian(inp) == pytest.approx(0.2 + 0.2 - 1.0 + 0.1 - 0.3 - 0.1)


def test_reduced_hamiltonian_maker_hand_computed():
    inp = ReducedHamiltonianInput("maker", [0.0], [0.0], [[1.0]], liq_price=[100.0], bid=[99.9], ask=[100.1],
                                  intensity_bid=[3.0], intensity_ask=[2.0])
    # 0.1 * 3 + 0.1 * 2 of spread capture per unit time
    assert reduced_hamiltonian(inp) == pytest.approx(0.5)
    with pytest.raises(ConfigurationError):
        ReducedHamiltonianInput("maker", [0.0], [0.0], [[1.0]], liq_price=[100.0])


def test_kappa_correction_quadratic_exposure():
    model = arithmetic_brownian([0.0], [[0.3]])
    # u(y) = y^2:  Tr(Du V R) = 2 y * 0.3
    assert kappa_correction(lambda t, y: y**2, model, 0.0, [2.0]) == pytest.approx(1.2, rel=1e-6)


@given(st.integers(0, 2**32))
def test_semimartingale_split_adds_up(seed):
    r = np.random.default_rng(seed)
    inc = r.standard_normal((7, 12))
    rep = semimartingale_split(inc, 0.3, 0.1)
    np.testing.assert_allclose(rep.drift_part + rep.martingale_part, inc.sum(axis=1))
    np.testing.assert_allclose(rep.drift_part, 0.36)


def test_compensated_fill_part_is_centered(rng):
    n, K, lam, dt = 4000, 50, 5.0, 0.02
    nb = rng.poisson(lam * dt, (n, K))
    na = rng.poisson(lam * dt, (n, K))
    f = dict(n_bid=nb, n_ask=na, intensity_bid=np.full((n, K), lam), intensity_ask=np.full((n, K), lam),
             capture_bid=np.full((n, K), 0.1), capture_ask=np.full((n, K), -0.1))
    rep = semimartingale_split(np.zeros((n, K)), 0.0, dt, fills=f)
    m, se = rep.compensated_mean
    assert abs(m) < 4 * se


def test_distribution_features(rng):
    x = rng.normal(1.0, 2.0, 5000)
    d = distribution_features(x, 0.95, n_boot=100, seed=1)
    assert d.mean_ci[0] < 1.0 < d.mean_ci[1]
    assert d.variance_ci[0] < 4.0 < d.variance_ci[1]
    assert d.cantelli_lower == pytest.approx(1 - 4 / 5, abs=0.05)
    # Gaussian CVaR of the loss -X ~ N(-1, 4): -1 + 2 * 2.0627
    assert d.gaussian_cvar == pytest.approx(-1 + 2 * 2.0627, abs=0.1)
    with pytest.raises(ConfigurationError):
        distribution_features(x[:50])


@pytest.mark.parametrize("law", ["gaussian", "rademacher"])
@pytest.mark.parametrize("lag", [1, 4])
def test_perturbation_second_moment(law, lag, rng):
    eps = PerturbationSpec(0.3, dim=2, law=law, lag_steps=lag).sample(rng, 5000, 20)
    assert eps.shape == (5000, 20, 2)
    assert np.mean(np.sum(eps**2, axis=-1)) == pytest.approx(0.3, rel=0.03)
    assert abs(eps.mean()) < 0.01


def test_pitman_morgan_detects_extra_variance(rng):
    x = rng.standard_normal(2000)
    assert pitman_morgan(x, x + 0.5 * rng.standard_normal(2000)) < 1e-6
    assert pitman_morgan(x, rng.standard_normal(2000)) > 1e-3


def test_dominance_report_orderings(rng):
    mo = rng.normal(0.1, 1.0, 20000)
    rl = mo - 0.05 + 0.3 * rng.standard_normal(20000)
    rep = dominance_report(mo, rl, PerturbationSpec(0.1), 1.0, n_boot=50)
    assert rep.flags["mean"] and rep.flags["variance"]
    assert rep.predicted_mean_gap == pytest.approx(0.05)
    assert json.loads(rep.to_json())["n_paths"] == 20000


def test_action_gradient_vanishes_at_myopic_optimum():
    gain = SeparableGain([1.0, -0.5], l1_cost=0.1, temp_impact=[[2.0, 0.3], [0.3, 1.0]])
    v = myopic_step(gain, [0.0, 0.0])
    np.testing.assert_allclose(hamiltonian_action_gradient(gain, [0.0, 0.0], v), 0.0, atol=1e-6)


class TestBacktests:
    def test_taker_mo_mean_pnl(self):
        sc = TakerScenario()
        mo, rl = run_taker_pair(sc, PerturbationSpec(0.1), 20000, 3)
        # l phi T - q phi^2 T / 2 at phi = l / q
        assert abs(mo.mean() - 0.125) < 4 * mo.std() / np.sqrt(mo.size)
        gap = mo - rl
        assert gap.mean() == pytest.approx(0.5 * sc.curvature * 0.1 * sc.horizon, rel=0.2)

    def test_taker_zero_floor_is_identical(self):
        mo, rl = run_taker_pair(TakerScenario(), PerturbationSpec(0.0), 200, 1)
        np.testing.assert_array_equal(mo, rl)

    def test_maker_mo_mean_pnl(self):
        sc = MakerScenario()
        mo, rl = run_maker_pair(sc, PerturbationSpec(2 * 0.03**2, 2), 4000, 5)
        # two sides, each delta * Lambda exp(-k delta) per unit time at delta = 1/k
        expected = 2 * 0.1 * 50 * np.exp(-1.0)
        assert abs(mo.mean() - expected) < 4 * mo.std() / np.sqrt(mo.size)
        assert (mo - rl).mean() > 0

    def test_maker_needs_two_sided_perturbation(self):
        with pytest.raises(ConfigurationError):
            run_maker_pair(MakerScenario(), PerturbationSpec(0.1, 1), 10, 0)

    def test_trained_policies(self):
        sc = TakerScenario()
        th = train_constant_policies(sc, 50, step=0.2, n_iter=200, seed=2)
        assert th.shape == (50,)
        assert abs(th.mean() - sc.mo_position) < 0.2
        mo, rl, floor = run_taker_trained(sc, th, 500, 4)
        assert floor == pytest.approx(np.mean((th - 0.5) ** 2))
        assert mo.shape == rl.shape == (500,)

    def test_constant_env_gradient_unbiased(self, rng):
        env = ConstantPositionEnv(TakerScenario())
        g = env.sample_gradient(np.zeros((20000, 1)), rng)
        assert g.mean() == pytest.approx(env.gradient(np.zeros(1))[0], abs=0.03)
