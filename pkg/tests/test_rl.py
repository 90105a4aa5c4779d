import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from myopic_lab.exceptions import ConfigurationError, DivergenceError
from myopic_lab.rl import (ContaminationSpec, LinearSignalEnv, OptimizerConfig, PolicyGradientController,
                           PolicyParams, QuadraticTestbed, estimate_policy_gradient, fit_log_linear, gap_ratio,
                           plateau_level, policy_action, preconditioned_ascent, self_bias_accumulate, train)


@pytest.fixture
def testbed():
    return QuadraticTestbed.spread(1.0, 10.0, 4, noise_var=1.0)


def test_policy_action_blocks():
    params = PolicyParams(np.array([1.0, 2.0, 3.0, 4.0]), n_assets=2)
    np.testing.assert_allclose(policy_action(params, features=[1.0, 1.0]), [3.0, 7.0])
    with pytest.raises(ConfigurationError):
        policy_action(params, features=[1.0, 1.0, 1.0])
    with pytest.raises(ConfigurationError):
        PolicyParams(np.ones(3), n_assets=2)


def test_testbed_spread_and_gap(testbed):
    np.testing.assert_allclose(testbed.curvatures, np.linspace(1.0, 10.0, 4))
    assert testbed.mu == 1.0 and testbed.L == 10.0
    assert testbed.gap(testbed.theta_star) == pytest.approx(0.0)
    # 1/2 sum lambda_i for a unit offset in every coordinate.
    assert testbed.gap(testbed.theta_star + 1.0) == pytest.approx(0.5 * testbed.curvatures.sum())


@given(st.floats(0.01, 0.19), st.integers(1, 60))
def test_deterministic_ascent_closed_form(eta, k):
    tb = QuadraticTestbed.spread(1.0, 10.0, 3)
    it = preconditioned_ascent(np.ones(3) + tb.theta_star, eta, k, tb)
    lam = tb.curvatures
    expected = 0.5 * np.sum(lam * (1 - eta * lam) ** (2 * k))
    assert tb.gap(it[-1]) == pytest.approx(expected, rel=1e-9, abs=1e-300)


def test_exact_training_equals_deterministic_ascent(testbed):
    tr = train(np.ones(4), OptimizerConfig(step=0.05, max_iter=30), testbed, exact=True)
    it = preconditioned_ascent(np.ones(4), 0.05, 30, testbed)
    np.testing.assert_allclose(tr.theta[:, 0], it, atol=1e-14)


def test_newton_preconditioner_converges_in_one_step(testbed):
    it = preconditioned_ascent(np.ones(4), 1.0, 1, testbed, preconditioner=testbed.curvatures)
    np.testing.assert_allclose(it[-1], testbed.theta_star, atol=1e-12)


def test_training_is_seed_deterministic(testbed):
    cfg = OptimizerConfig(step=0.05, max_iter=20, n_replicas=3)
    a = train(np.zeros(4), cfg, testbed, seed=5)
    b = train(np.zeros(4), cfg, testbed, seed=5)
    c = train(np.zeros(4), cfg, testbed, seed=6)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)
    assert not np.array_equal(a.theta[-1, 0], a.theta[-1, 1])


def test_decreasing_schedule():
    cfg = OptimizerConfig(schedule="decreasing", decay_c=2.0, strong_concavity=1.0)
    # offset ceil(c L / mu) = 8 for L = 4
    assert cfg.eta(1, 4.0) == pytest.approx(2.0 / 9.0)
    assert OptimizerConfig(schedule="decreasing", offset=1.0).eta(1) == pytest.approx(0.5)


def test_variance_floor_matches_stationary_formula():
    tb = QuadraticTestbed.spread(1.0, 4.0, 4, noise_var=1.0)
    eta = 0.1
    tr = train(np.zeros(4), OptimizerConfig(step=eta, max_iter=3000, n_replicas=200), tb, seed=2)
    lam = tb.curvatures
    # e <- (1 - eta lam) e + eta xi, Var xi = s:  E gap = sum eta s / (2 (2 - eta lam))
    pred = np.sum(eta * (1.0 / 4) / (2 * (2 - eta * lam)))
    assert plateau_level(tr.mean_gap, 0.5) == pytest.approx(pred, rel=0.1)


def test_divergence_raises_with_trace(testbed):
    with pytest.raises(DivergenceError) as info:
        train(np.ones(4), OptimizerConfig(step=0.5, max_iter=100, divergence_guard=1e3), testbed, exact=True)
    assert info.value.trace.diverged


def test_additive_bias_and_self_bias(testbed):
    bias = np.array([0.1, 0.0, 0.0, 0.0])
    tr = train(np.zeros(4), OptimizerConfig(step=0.05, max_iter=10), testbed,
               ContaminationSpec("additive_bias", 2.0, bias), exact=True)
    np.testing.assert_allclose(tr.bias[:, 0], np.broadcast_to(2 * bias, (10, 4)))
    manual = sum(0.05 * (2 * bias) @ tr.grad_impl[k, 0] for k in range(10))
    assert self_bias_accumulate(tr) == pytest.approx(manual)
    assert tr.self_bias_cum[-1] == pytest.approx(manual)


def test_contamination_validation():
    with pytest.raises(ConfigurationError):
        ContaminationSpec("mystery")
    assert np.all(ContaminationSpec().additive(np.ones(3)) == 0)


@pytest.mark.parametrize("method", ["pathwise", "score"])
def test_gradient_estimators_unbiased(method, rng):
    env = LinearSignalEnv(np.array([0.5, -0.2]), cost=1.0)
    theta = np.array([0.1, 0.3])
    g, var = estimate_policy_gradient(theta, env, 200000, method, rng)
    se = np.sqrt(var / 2)
    np.testing.assert_allclose(g, env.gradient(theta), atol=5 * se)


def test_pathwise_has_lower_variance(rng):
    env = LinearSignalEnv(np.array([0.5, -0.2]))
    _, v_pw = estimate_policy_gradient(np.zeros(2), env, 5000, "pathwise", rng)
    _, v_sc = estimate_policy_gradient(np.zeros(2), env, 5000, "score", rng)
    assert v_pw < v_sc


def test_fit_log_linear_exact():
    x = np.arange(10.0)
    slope, intercept, r2 = fit_log_linear(x, 3.0 * 0.8**x)
    assert slope == pytest.approx(np.log(0.8)) and intercept == pytest.approx(np.log(3.0)) and r2 == pytest.approx(1.0)
    np.testing.assert_allclose(gap_ratio([2.0, 4.0], [1.0, 2.0]), [2.0, 2.0])


def test_trace_csv(tmp_path, testbed):
    tr = train(np.zeros(4), OptimizerConfig(step=0.05, max_iter=5), testbed)
    cols = tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(cols) and len(lines) == 7


class TestController:
    def test_fit_predict_exact(self):
        env = LinearSignalEnv(np.array([0.5, -0.2]))
        est = PolicyGradientController(step=0.5, max_iter=60, method="exact").fit(env)
        np.testing.assert_allclose(est.theta_, env.beta, atol=1e-10)
        np.testing.assert_allclose(est.predict([[1.0, 1.0]]), [[0.3]], atol=1e-10)

    def test_clone_and_params(self):
        est = PolicyGradientController(step=0.3, seed=4)
        c = clone(est)
        assert c.get_params()["step"] == 0.3 and c.get_params()["seed"] == 4


def test_sgd_on_signal_env_reaches_optimum():
    env = LinearSignalEnv(np.array([0.5, -0.2]), noise_sd=0.5)
    tr = train(np.zeros(2), OptimizerConfig(step=0.02, max_iter=2000, n_replicas=20), env, seed=1)
    np.testing.assert_allclose(tr.theta[-1].mean(axis=0), env.beta, atol=0.05)
