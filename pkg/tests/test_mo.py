import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize

from myopic_lab.exceptions import ConfigurationError
from myopic_lab.ledger import HoldingCostModel
from myopic_lab.mo import (FeasibleSet, KktMultipliers, MyopicController, SeparableGain, gradient_kernel,
                           kkt_residual, myopic_drive, myopic_step, project_feasible, shadow_price,
                           soft_threshold, solve_soft_threshold, transient_convolution, volterra_adjoint)
from myopic_lab.sde import PathGrid, geometric_brownian

vec3 = arrays(np.float64, 3, elements=st.floats(-5, 5))


def _spd(seed, n=3):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def _qp_oracle(d, Xi, lam):
    """Split v = a - b with a, b >= 0 and solve the smooth bound-constrained problem."""
    n = d.size

    def f(z):
        v = z[:n] - z[n:]
        val = -(d @ v - lam @ (z[:n] + z[n:]) - 0.5 * v @ Xi @ v)
        g = -(d - Xi @ v)
        return val, np.concatenate([g + lam, -g + lam])

    r = optimize.minimize(f, np.zeros(2 * n), jac=True, method="L-BFGS-B", bounds=[(0, None)] * (2 * n),
                          options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000})
    return r.x[:n] - r.x[n:]


@given(vec3, arrays(np.float64, 3, elements=st.floats(0.0, 3.0)))
def test_no_trade_wedge_is_exact_zero(d, lam):
    d = np.clip(d, -lam, lam)
    v = solve_soft_threshold(d, np.diag([1.0, 2.0, 0.5]), lam)
    assert np.all(v == 0.0)


@given(vec3, arrays(np.float64, 3, elements=st.floats(0.0, 3.0)))
def test_diagonal_impact_closed_form(d, lam):
    xi = np.array([1.0, 2.0, 0.5])
    v = solve_soft_threshold(d, np.diag(xi), lam)
    np.testing.assert_allclose(v, soft_threshold(d, lam) / xi, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_coupled_impact_matches_qp_oracle(seed):
    r = np.random.default_rng(seed)
    Xi = _spd(seed)
    d = 3 * r.standard_normal(3)
    lam = r.uniform(0, 1, 3)
    v = solve_soft_threshold(d, Xi, lam)
    np.testing.assert_allclose(v, _qp_oracle(d, Xi, lam), atol=1e-5)
    assert kkt_residual(d - Xi @ v, v, l1=lam) <= 1e-6


def test_convergence_history_decreases():
    v, hist = solve_soft_threshold(np.array([3.0, -2.0, 1.0]), _spd(1), np.full(3, 0.1), return_history=True)
    assert hist[-1] <= 1e-8 and hist[-1] <= hist[0]


def test_drive_includes_penalty_and_holding_cost():
    gain = SeparableGain([1.0], inventory_penalty=0.5, holding_cost=HoldingCostModel(hold=0.1))
    # 1 - 0.5 * 2 - 0.1 * sign(2) - risk 0.2
    assert myopic_drive(gain, [2.0], 0.2)[0] == pytest.approx(-0.3)


def test_speed_box_clip_and_feasible_step():
    gain = SeparableGain([10.0], temp_impact=1.0)
    fs = FeasibleSet(position_high=1.0, speed_cap=5.0)
    assert myopic_step(gain, [0.0], feasible=fs, dt=0.5)[0] == pytest.approx(2.0)
    assert myopic_step(gain, [0.0], feasible=fs, dt=0.01)[0] == pytest.approx(5.0)


@pytest.mark.parametrize("seed", range(4))
def test_box_ball_projection_matches_oracle(seed):
    r = np.random.default_rng(seed)
    x = 3 * r.standard_normal(3)
    fs = FeasibleSet(position_low=-1.0, position_high=0.5, speed_cap=1.2, speed_norm="2")
    got = project_feasible(x, fs, kind="speed", position=np.zeros(3), dt=1.0, tol=1e-12)
    cons = [{"type": "ineq", "fun": lambda y: 1.2**2 - y @ y}]
    ref = optimize.minimize(lambda y: np.sum((y - x) ** 2), np.zeros(3), bounds=[(-1, 0.5)] * 3,
                            constraints=cons, method="SLSQP", options={"ftol": 1e-14}).x
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_participation_cap_limits_positions():
    fs = FeasibleSet(participation_cap=0.1, adv=50.0)
    np.testing.assert_allclose(project_feasible([10.0, -2.0], fs), [5.0, -2.0])
    with pytest.raises(ConfigurationError):
        FeasibleSet(position_low=1.0, position_high=0.0)


def test_risk_budget_scales_down_the_trade():
    gain = SeparableGain([1.0], temp_impact=1.0, return_cov=[[4.0]])
    loose = myopic_step(gain, [0.0], feasible=FeasibleSet(), dt=1.0)
    tight = myopic_step(gain, [0.0], feasible=FeasibleSet(risk_budget=0.5), dt=1.0)
    assert 0 <= tight[0] < loose[0]


def test_kkt_residual_terms():
    x = np.array([1.0, 0.0])
    terms = kkt_residual(np.array([0.5, 0.0]), x, KktMultipliers(upper=[0.5, 0.0]), box=([-1, -1], [1, 1]),
                         return_terms=True)
    assert terms["stationarity"] == 0.0 and terms["violation"] == 0.0 and terms["complementarity"] == 0.0
    assert kkt_residual(np.array([1.0]), np.array([0.0])) == pytest.approx(1.0)


def _conv_matrix(kernel, tau, grid):
    n = grid.n_steps + 1
    A = np.zeros((n, n))
    for j in range(n):
        e = np.zeros((n, 1))
        e[j] = 1.0
        A[:, j] = transient_convolution(kernel, tau, e, grid)[:, 0]
    return A


@pytest.mark.parametrize("tau", [0.1, 0.25, 2.0])
def test_volterra_adjoint_matches_bruteforce(tau):
    grid = PathGrid(1.0, 40)
    kernel = lambda lag: 0.7 * np.exp(-3.0 * lag)  # noqa: E731
    s = np.random.default_rng(1).standard_normal(41)
    A = _conv_matrix(kernel, tau, grid)
    p = volterra_adjoint(kernel, tau, s, grid).p[:, 0]
    np.testing.assert_allclose(p, A[:-1].T @ s[:-1], atol=1e-8)
    assert p[-1] == 0.0


@given(st.integers(0, 2**32))
def test_volterra_duality(seed):
    r = np.random.default_rng(seed)
    grid = PathGrid(2.0, 30)
    kernel = lambda lag: np.array([[1.0, 0.2], [0.0, 0.5]]) * np.exp(-lag)  # noqa: E731
    v = r.standard_normal((31, 2))
    s = r.standard_normal((31, 2))
    I = transient_convolution(kernel, 0.5, v, grid)
    p = volterra_adjoint(kernel, 0.5, s, grid).p
    assert np.sum(s[:-1] * I[:-1]) == pytest.approx(np.sum(p * v), abs=1e-8)


def test_gradient_kernel_forward_difference():
    out = gradient_kernel(np.ones(4), np.array([0.0, 1.0, 3.0, 6.0]), 0.5, 1.0)
    np.testing.assert_allclose(out, [1 - 1 - 0.5, 1 - 2 - 0.5, 1 - 3 - 0.5, 1 - 3 - 0.5])


def test_shadow_price_methods_agree_with_closed_form():
    # E[D_0 Y_T] = sigma y0 exp(mu T) for GBM.
    mu, sig = 0.05, 0.2
    model = geometric_brownian([mu], [sig])
    grid = PathGrid(1.0, 32)
    pw = shadow_price(model, grid, [1.0], lambda y: y[:, 0], lambda y: np.ones_like(y), (0.0, 1.0),
                      "pathwise", 20000, 3)
    bel = shadow_price(model, grid, [1.0], lambda y: y[:, 0], None, (0.0, 1.0), "bel", 20000, 3)
    target = sig * np.exp(mu)
    assert pw.value[0] == pytest.approx(target, abs=4 * pw.se[0] + 1e-3)
    assert abs(bel.value[0] - target) < 4 * bel.se[0]


class TestController:
    def test_fit_predict(self):
        ctl = MyopicController(SeparableGain([1.0, -1.0], l1_cost=0.5, temp_impact=2.0)).fit()
        np.testing.assert_allclose(ctl.predict([[0.0, 0.0], [1.0, 1.0]]), [[0.25, -0.25], [0.25, -0.25]])

    def test_terminal_ramp(self):
        fs = FeasibleSet(terminal_target=np.zeros(1), terminal_window=0.2)
        ctl = MyopicController(SeparableGain([1.0]), fs, dt=0.1, horizon=1.0).fit()
        assert ctl.speed([2.0], t=0.9)[0] == pytest.approx(-20.0)
        assert ctl.speed([2.0], t=0.1)[0] == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            MyopicController().fit()
        ctl = MyopicController(SeparableGain([1.0])).fit()
        with pytest.raises(ConfigurationError):
            ctl.predict([[1.0, 2.0]])

    def test_get_params_roundtrip(self):
        ctl = MyopicController(SeparableGain([1.0]), dt=0.5)
        assert ctl.get_params()["dt"] == 0.5
