"""Experiment runners behind the CLI subcommands.

Every runner takes a validated :class:`ScenarioConfig`, a seed, a path count
and a thread count, and returns an :class:`ExperimentResult`: CSV tables plus
a JSON-serializable summary.  Runners are deterministic in ``(config, seed)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from ..backtest import (MakerScenario, TakerScenario, run_maker_pair, run_taker_pair, run_taker_trained,
                        train_constant_policies)
from ..cad import CadModel, QuadraticUtility, finite_difference_check, surplus_and_scan
from ..exceptions import ConfigurationError
from ..frictions import LiquidationModel, TakerModel, TradeHistory, exec_price_taker, exponential_kernel, liq_price
from ..ledger import CashRates, HoldingCostModel, LedgerState, LedgerTrace, step_taker
from ..mo import FeasibleSet, SeparableGain, kkt_residual, myopic_drive, myopic_step
from ..phantom import (LeakageSpec, LookaheadTrainingEnv, MarketScenario, decompose_phantom,
                       normal_proxy_probability, phantom_profit, slope_vs_window, solution_bias)
from ..pnl import PerturbationSpec, distribution_features, dominance_report
from ..rl import (ContaminationSpec, OptimizerConfig, PolicyGradientController, QuadraticTestbed,
                  fit_log_linear, plateau_level, preconditioned_ascent, self_bias_accumulate, train)
from ..sde import PathGrid, arithmetic_brownian, geometric_brownian, ornstein_uhlenbeck, simulate_paths
from .config import ScenarioConfig

__all__ = ["ExperimentResult", "RUNNERS", "run_experiment"]


@dataclass
class Table:
    columns: list
    rows: list


@dataclass
class ExperimentResult:
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    blow_ups: int = 0
    n_paths: int = 0

    def add(self, name: str, columns, rows):
        self.tables[name] = Table(list(columns), [list(r) for r in rows])


def _params(cfg: ScenarioConfig, defaults: dict) -> dict:
    given = cfg.experiment.params
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown experiment parameter(s) for {cfg.experiment.kind!r}: "
                                 f"{', '.join(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def _market_model(cfg: ScenarioConfig):
    m = cfg.market
    if m.model == "abm":
        return arithmetic_brownian(m.drift, m.vol)
    if m.model == "gbm":
        return geometric_brownian(m.drift, m.vol)
    return ornstein_uhlenbeck(m.kappa, m.vol, m.mean)


def _grid(cfg: ScenarioConfig) -> PathGrid:
    return PathGrid(cfg.market.horizon, cfg.market.n_steps)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def run_simulate(cfg, seed, n_paths, threads) -> ExperimentResult:
    p = _params(cfg, {"write_paths": 20})
    model = _market_model(cfg)
    grid = _grid(cfg)
    batch = simulate_paths(model, grid, [cfg.market.y0], n_paths, seed, n_threads=threads)
    res = ExperimentResult(blow_ups=batch.n_blown_up, n_paths=n_paths)
    n_out = min(int(p["write_paths"]), len(batch))
    rows = [[int(batch.path_index[i]), t, *batch.states[i, k]]
            for i in range(n_out) for k, t in enumerate(grid.times)]
    res.add("paths.csv", ["path", "time"] + [f"y_{j}" for j in range(model.dim_state)], rows)
    yT = batch.states[:, -1, 0]
    if yT.size > 1:
        mean, var = float(yT.mean()), float(yT.var(ddof=1))
        se = float(np.sqrt(var / yT.size))
    else:
        mean = var = se = float("nan")
    res.add("terminal.csv", ["statistic", "value"], [["mean", mean], ["variance", var], ["se_mean", se]])
    res.summary = {"terminal_mean": mean, "terminal_variance": var,
                   "n_blown_up": batch.n_blown_up}
    return res


# ---------------------------------------------------------------------------
# mo-run
# ---------------------------------------------------------------------------


def _gain(cfg) -> SeparableGain:
    lg = cfg.ledger
    hc = HoldingCostModel(lend=lg.lend, hold=lg.hold, quad=lg.quad)
    return SeparableGain(drift=[cfg.policy.signal], inventory_penalty=cfg.policy.inventory_penalty,
                         l1_cost=cfg.frictions.l1_cost, temp_impact=cfg.frictions.temp_impact, holding_cost=hc)


def _feasible(cfg) -> FeasibleSet:
    f = cfg.feasible
    return FeasibleSet(position_low=f.position_low, position_high=f.position_high, speed_cap=f.speed_cap)


def run_mo(cfg, seed, n_paths, threads) -> ExperimentResult:
    p = _params(cfg, {"write_paths": 5, "alpha": 0.95})
    model = _market_model(cfg)
    grid = _grid(cfg)
    batch = simulate_paths(model, grid, [cfg.market.y0], n_paths, seed, n_threads=threads)
    n = len(batch)
    fr = cfg.frictions
    kernel = exponential_kernel(fr.kernel_rate, fr.kernel_scale) if fr.kernel_scale > 0 else None
    taker = TakerModel(1, fr.half_spread, fr.temp_impact, kernel, fr.tau_fill)
    # An unbounded ADV means no block discount.
    finite_adv = math.isfinite(fr.adv)
    liq = LiquidationModel(adv=fr.adv if finite_adv else 1.0, discount_coef=fr.discount_coef if finite_adv else 0.0)
    lg = cfg.ledger
    rates = CashRates(lg.credit, lg.funding, lg.tax)
    hc = HoldingCostModel(lend=lg.lend, hold=lg.hold, quad=lg.quad)
    gain = _gain(cfg)
    feasible = _feasible(cfg)
    h = grid.step
    history = TradeHistory(fr.tau_fill, h) if kernel is not None and fr.tau_fill > 0 else None
    states = batch.states
    phi = np.zeros((n, 1))
    mark = liq_price(liq, states[:, 0], phi, fr.half_spread)
    led = LedgerState.initial(phi, mark)
    trace = LedgerTrace()
    trace.record(0.0, led)
    residuals = []
    for k in range(grid.n_steps):
        v1 = myopic_step(gain, phi[0], feasible=feasible, dt=h)
        residuals.append(_mo_kkt(gain, feasible, phi[0], v1, h))
        speed = np.broadcast_to(v1, (n, 1))
        if history is not None:
            history.push(grid.times[k], speed)
        px = exec_price_taker(taker, states[:, k], speed, history=history)
        new_phi = led.position + speed * h
        new_mark = liq_price(liq, states[:, k + 1], new_phi, fr.half_spread)
        led = step_taker(led, rates, hc, new_mark, None, px, speed, states[:, k, :1], h)
        phi = led.position
        trace.record(grid.times[k + 1], led)
    res = ExperimentResult(blow_ups=batch.n_blown_up, n_paths=n_paths)
    n_out = min(int(p["write_paths"]), n)
    cols = trace.columns(1)
    rows = []
    for i in range(n_out):
        rows.extend([[i] + r for r in trace.rows(i)])
    res.add("ledger.csv", cols, rows)
    res.add("kkt.csv", ["step", "kkt_residual"], [[k, r] for k, r in enumerate(residuals)])
    pnl = led.wealth
    res.summary = {"mean_pnl": float(pnl.mean()), "final_position": float(phi[0, 0]),
                   "max_kkt_residual": float(max(residuals))}
    if n >= 100:
        d = distribution_features(pnl, p["alpha"], n_boot=100, seed=seed % (2**32))
        res.summary.update({"variance": d.variance, "cvar_loss": d.cvar_loss, "p_positive": d.p_positive})
    return res


def _mo_kkt(gain: SeparableGain, feasible: FeasibleSet, phi, v, h: float) -> float:
    """Prox-gradient residual of the one-step speed problem over the speed box."""
    grad = myopic_drive(gain, phi) - gain.temp_impact @ v
    lo, hi = feasible.effective_box(np.shape(phi))
    cap = np.asarray(feasible.speed_cap, float)
    box = (np.maximum((lo - phi) / h, -cap), np.minimum((hi - phi) / h, cap))
    return float(kkt_residual(grad, v, box=box, l1=gain.l1_cost))


# ---------------------------------------------------------------------------
# rl-run
# ---------------------------------------------------------------------------


def run_rl(cfg, seed, n_paths, threads) -> ExperimentResult:
    _params(cfg, {})
    pol = cfg.policy
    quad = pol.inventory_penalty if pol.inventory_penalty > 0 else max(cfg.ledger.quad, 1e-12)
    sc = TakerScenario(drift=pol.signal, sigma=cfg.market.vol, quad_cost=quad)
    from ..backtest import ConstantPositionEnv

    env = ConstantPositionEnv(sc)
    est = PolicyGradientController(step=pol.step, max_iter=pol.max_iter, batch_size=pol.batch_size, seed=seed)
    est.fit(env)
    tr = est.trace_
    res = ExperimentResult(n_paths=0)
    gv = np.concatenate([tr.grad_var[: tr.completed].mean(axis=1), [np.nan]])
    sb = tr.self_bias_cum
    res.add("rl_trace.csv", ["iteration", "theta", "gap", "grad_variance", "self_bias_cum"],
            [[k, float(tr.theta[k, 0, 0]), float(g), float(gv[k]), float(sb[k])]
             for k, g in enumerate(tr.mean_gap)])
    res.summary = {"theta": float(est.theta_[0]), "mo_position": sc.mo_position,
                   "final_gap": float(tr.mean_gap[-1])}
    return res


# ---------------------------------------------------------------------------
# converge
# ---------------------------------------------------------------------------


def _portfolio_testbed(p):
    """One-asset mean-variance-L1 objective; optimum by golden-section search to 1e-10."""
    ell, gam, c = p["portfolio_drift"], p["portfolio_risk"], p["portfolio_l1"]

    def J(x):
        return ell * x - 0.5 * gam * x * x - c * abs(x)

    r = optimize.minimize_scalar(lambda x: -J(x), bracket=(-10.0, 0.0, 10.0), method="golden", tol=1e-10)
    return J, float(r.x), float(J(r.x))


def run_converge(cfg, seed, n_paths, threads) -> ExperimentResult:
    p = _params(cfg, {
        "testbed": "quadratic", "mu": 1.0, "L": 10.0, "dim": 10, "noise_var": 1.0, "theta0": 1.0,
        "mo_iter": 200, "rl_step": 0.05, "rl_iter": 1000, "replicas": 100, "burn_in": 20,
        "floor_steps": [], "floor_iter": 20000, "floor_L": 4.0, "floor_replicas": 200,
        "rate_checkpoints": [], "rate_c": 2.0, "rate_replicas": 400, "rate_L": 4.0,
        "portfolio_drift": 0.1, "portfolio_risk": 2.0, "portfolio_l1": 0.02,
    })
    res = ExperimentResult(n_paths=0)
    if p["testbed"] == "portfolio":
        J, x_star, J_star = _portfolio_testbed(p)
        res.summary = {"testbed": "portfolio", "theta_star": x_star, "J_star": J_star}
        res.add("optimum.csv", ["theta_star", "J_star"], [[x_star, J_star]])
        return res
    if p["testbed"] != "quadratic":
        raise ConfigurationError("converge testbed must be 'quadratic' or 'portfolio'")
    dim = int(p["dim"])
    tb = QuadraticTestbed.spread(p["mu"], p["L"], dim, noise_var=p["noise_var"])
    th0 = np.full(dim, float(p["theta0"]))
    K_mo = int(p["mo_iter"])
    K_rl = int(p["rl_iter"])
    K = max(K_mo, K_rl)
    mo_iters = preconditioned_ascent(th0, 1.0 / tb.L, K, tb)
    mo_gap = tb.gap(mo_iters)
    mo_kkt = np.linalg.norm(tb.gradient(mo_iters), axis=1)
    tr = train(th0, OptimizerConfig(step=p["rl_step"], max_iter=K_rl, n_replicas=int(p["replicas"])), tb, seed=seed)
    rl_gap = tr.mean_gap
    rl_kkt = np.linalg.norm(tb.gradient(tr.theta), axis=2).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = rl_gap / mo_gap[: K_rl + 1]
    rows = [[k, float(mo_gap[k]), float(rl_gap[k]) if k <= K_rl else math.nan,
             float(gamma[k]) if k <= K_rl else math.nan, float(mo_kkt[k]),
             float(rl_kkt[k]) if k <= K_rl else math.nan] for k in range(K + 1)]
    res.add("convergence.csv", ["k", "mo_gap", "rl_gap", "gamma", "mo_kkt_residual", "rl_kkt_residual"], rows)
    ks = np.arange(K_mo + 1)
    slope, _, r2 = fit_log_linear(ks[1:], mo_gap[1:K_mo + 1])
    burn = int(p["burn_in"])
    g = gamma[burn:]
    res.summary = {
        "mo_contraction": float(np.exp(slope)), "mo_log_r2": r2,
        "rl_plateau": plateau_level(rl_gap),
        "gamma_increasing_after_burn_in": bool(np.all(np.diff(g[np.isfinite(g)]) > 0)),
        "gamma_200_over_50": float(gamma[200] / gamma[50]) if K_rl >= 200 else math.nan,
        "final_mo_kkt": float(mo_kkt[K_mo]),
    }

    if p["floor_steps"]:
        tbf = QuadraticTestbed.spread(p["mu"], p["floor_L"], dim, noise_var=p["noise_var"])
        rows = []
        plateaus = []
        for i, eta in enumerate(p["floor_steps"]):
            cfg_f = OptimizerConfig(step=float(eta), max_iter=int(p["floor_iter"]), n_replicas=int(p["floor_replicas"]))
            trf = train(np.zeros(dim), cfg_f, tbf, seed=seed + 1 + i)
            pl = plateau_level(trf.mean_gap)
            lam = tbf.curvatures
            s = p["noise_var"] / dim
            pred = float(np.sum(eta * s / (2.0 * (2.0 - eta * lam))))
            plateaus.append(pl)
            rows.append([float(eta), pl, pred])
        res.add("floor.csv", ["eta", "plateau", "predicted"], rows)
        sl = float(np.polyfit(np.log(p["floor_steps"]), np.log(plateaus), 1)[0])
        res.summary["floor_loglog_slope"] = sl
        res.summary["floor_min_ratio_to_prediction"] = float(min(r[1] / r[2] for r in rows))

    if p["rate_checkpoints"]:
        cps = [int(c) for c in p["rate_checkpoints"]]
        tbr = QuadraticTestbed.spread(p["mu"], p["rate_L"], dim, noise_var=p["noise_var"], theta_star=np.ones(dim))
        cfg_r = OptimizerConfig(schedule="decreasing", decay_c=p["rate_c"], strong_concavity=p["mu"],
                                max_iter=max(cps), n_replicas=int(p["rate_replicas"]))
        trr = train(np.zeros(dim), cfg_r, tbr, seed=seed + 101)
        gaps = trr.mean_gap[cps]
        res.add("rate.csv", ["K", "gap"], [[k, float(gv)] for k, gv in zip(cps, gaps)])
        res.summary["rate_loglog_slope"] = float(np.polyfit(np.log(cps), np.log(gaps), 1)[0])
    return res


# ---------------------------------------------------------------------------
# dominance
# ---------------------------------------------------------------------------


def run_dominance(cfg, seed, n_paths, threads) -> ExperimentResult:
    p = _params(cfg, {
        "mode": "taker", "floor": 0.1, "quad_cost": 1.0, "n_steps": 100, "horizon": 1.0, "alpha": 0.95,
        "n_boot": 200, "lag_steps": 1, "base_intensity": 50.0, "decay": 10.0, "offset_sd": 0.03,
        "n_runs": 200, "train_iter": 200, "write_paths": 1000,
    })
    mode = p["mode"]
    h = cfg.policy
    if mode in ("taker", "trained"):
        sc = TakerScenario(drift=h.signal, sigma=cfg.market.vol, quad_cost=p["quad_cost"],
                           horizon=p["horizon"], n_steps=int(p["n_steps"]))
        if mode == "taker":
            pert = PerturbationSpec(p["floor"], 1, lag_steps=int(p["lag_steps"]))
            mo, rl = run_taker_pair(sc, pert, n_paths, seed)
        else:
            thetas = train_constant_policies(sc, int(p["n_runs"]), step=h.step, n_iter=int(p["train_iter"]),
                                             batch=h.batch_size, seed=seed + 1)
            mo, rl, floor = run_taker_trained(sc, thetas, n_paths, seed)
            pert = PerturbationSpec(floor, 1)
        mu = sc.curvature
        T = sc.horizon
    elif mode == "maker":
        sc = MakerScenario(p["base_intensity"], p["decay"], cfg.market.vol, p["horizon"], int(p["n_steps"]))
        pert = PerturbationSpec(2 * p["offset_sd"] ** 2, 2, lag_steps=int(p["lag_steps"]))
        mo, rl = run_maker_pair(sc, pert, n_paths, seed)
        mu = sc.curvature
        T = sc.horizon
    else:
        raise ConfigurationError("dominance mode must be taker, maker or trained")
    rep = dominance_report(mo, rl, pert, mu, T, p["alpha"], int(p["n_boot"]), seed % (2**32))
    res = ExperimentResult(n_paths=n_paths)
    n_out = min(int(p["write_paths"]), n_paths)
    res.add("dominance_pnl.csv", ["path", "pnl_mo", "pnl_rl"], [[i, mo[i], rl[i]] for i in range(n_out)])
    res.add("dominance_summary.csv", ["feature", "gap", "p_value", "flag"],
            [[k, g, rep.p_values[k], int(rep.flags[k])]
             for k, g in zip(("mean", "variance", "cvar", "positivity"),
                             (rep.mean_gap, rep.var_gap, rep.cvar_gap, rep.ppos_gap))])
    res.summary = {"mode": mode, "mean_gap": rep.mean_gap, "var_gap": rep.var_gap, "cvar_gap": rep.cvar_gap,
                   "ppos_gap": rep.ppos_gap, "p_values": rep.p_values, "flags": rep.flags,
                   "predicted_mean_gap": rep.predicted_mean_gap, "proxy": rep.proxy, "floor": pert.floor,
                   "n_paths": rep.n_paths}
    return res


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


def run_audit(cfg, seed, n_paths, threads) -> ExperimentResult:
    p = _params(cfg, {
        "windows": [1, 2, 4, 8, 16], "gain": 1.0, "base": 0.5, "alpha": 0.3, "decomposition_window": 8,
        "adapted_seeds": 20, "self_bias_windows": [2, 4, 8], "self_bias_eta": 1.0, "self_bias_iter": 100,
        "self_bias_batch": 100, "self_bias_eval_paths": 20000, "z_table": [0.3, 0.5, 0.7, 1.0, 1.3, 1.6],
        "sol_replicas": 200, "sol_iter": 10, "sol_eta": 0.05, "sol_bias_scale": 0.05, "sol_bias_mean": 0.02, "sol_noise_var": 0.01,
        "n_steps": 256, "bar_steps": 32, "drift": 0.05, "sigma": 1.0,
    })
    sc = MarketScenario(drift=p["drift"], sigma=p["sigma"], n_steps=int(p["n_steps"]), bar_steps=int(p["bar_steps"]))
    res = ExperimentResult(n_paths=n_paths)
    base = p["base"]

    x, pis, ses, slope, intercept, r2 = slope_vs_window(base, p["windows"], p["gain"], sc, n_paths, seed)
    res.add("phantom_slope.csv", ["window_steps", "window_time", "pi_ph", "se"],
            [[int(w), float(xt), float(pi), float(se)] for w, xt, pi, se in zip(p["windows"], x, pis, ses)])

    rows = []
    lag = LeakageSpec("lookahead", int(p["decomposition_window"]), p["gain"], lag=True)
    for s in range(int(p["adapted_seeds"])):
        r = phantom_profit(base, lag, sc, n_paths, seed + 1000 + s)
        rows.append([s, r.pi_ph, r.se, int(abs(r.pi_ph) < 3 * r.se)])
    res.add("phantom_adapted.csv", ["seed_offset", "pi_ph", "se", "within_3se"], rows)

    dec = decompose_phantom(base, LeakageSpec("lookahead", int(p["decomposition_window"]), p["gain"]),
                            LeakageSpec("info_drift", alpha=p["alpha"]), sc, n_paths, seed + 1)
    res.add("phantom_decomposition.csv", ["cell", "pi_ph", "se", "info_premium", "skorokhod", "skorokhod_se",
                                          "info_bound"],
            [[k, c.pi_ph, c.se, c.info_premium, c.skorokhod, c.skorokhod_se, c.info_bound]
             for k, c in dec.cells.items()])

    sb_rows = []
    for i, w in enumerate(p["self_bias_windows"]):
        env = LookaheadTrainingEnv(sc, int(w))
        cfg_t = OptimizerConfig(step=p["self_bias_eta"], max_iter=int(p["self_bias_iter"]),
                                batch_size=int(p["self_bias_batch"]))
        tr = train(np.zeros(2), cfg_t, env, ContaminationSpec("lookahead"), seed=seed + 2000 + i)
        b_self = self_bias_accumulate(tr)
        th = tr.theta[tr.completed, 0]
        r = phantom_profit(th[0], LeakageSpec("lookahead", int(w), float(th[1])), sc,
                           int(p["self_bias_eval_paths"]), seed + 3000 + i)
        sb_rows.append([int(w), b_self, r.pi_ph, r.se, b_self / r.pi_ph if r.pi_ph else math.nan])
    res.add("self_bias.csv", ["window_steps", "b_self", "pi_impl", "pi_se", "ratio"], sb_rows)

    sol = _solution_bias_experiment(p, seed + 4000)
    res.add("solution_bias.csv", ["replica", "b_sol", "Z", "M"],
            [[r, float(sol.b_sol[r]), float(sol.Z[r]), float(sol.M[r])] for r in range(sol.Z.size)])
    res.add("z_table.csv", ["z_eff", "p_positive"],
            [[float(z), float(normal_proxy_probability(z))] for z in p["z_table"]])

    res.summary = {
        "pi_ph": float(pis[-1]), "ci": [float(pis[-1] - 1.96 * ses[-1]), float(pis[-1] + 1.96 * ses[-1])],
        "slope_vs_dt": slope, "intercept": intercept, "r2": r2,
        "adapted_all_within_3se": bool(all(r[3] for r in rows)),
        "I": dec.info_premium, "S": dec.skorokhod, "total": dec.total,
        "additivity_residual": dec.residual, "additivity_ci": list(dec.residual_ci), "additive": dec.additive(),
        "self_bias_ratio_smallest": float(sb_rows[0][4]),
        "Z": float(np.mean(sol.Z)), "M": float(np.mean(sol.M)), "z_eff": sol.z_eff,
        "p_positive_normal": sol.p_positive_normal, "p_positive_lr": sol.p_positive_lr,
        "sign_agreement": float(np.mean(np.sign(sol.b_sol) == np.sign(sol.Z))),
    }
    return res


def _solution_bias_experiment(p, seed):
    """Additive per-replica contamination on a quadratic testbed, clean and implemented runs on shared noise."""
    dim = 2
    tb = QuadraticTestbed(np.array([1.0, 2.0]), np.array([1.0, -1.0]), noise_var=p["sol_noise_var"])
    R = int(p["sol_replicas"])
    rng = np.random.default_rng(seed)
    bias = p["sol_bias_mean"] * np.array([1.0, -1.0]) + rng.standard_normal((R, dim)) * p["sol_bias_scale"]
    cfg_t = OptimizerConfig(step=p["sol_eta"], max_iter=int(p["sol_iter"]), n_replicas=R)
    th0 = np.zeros(dim)
    impl = train(th0, cfg_t, tb, ContaminationSpec("additive_bias", 1.0, bias), seed=seed + 1)
    naive = train(th0, cfg_t, tb, None, seed=seed + 1)
    C = lambda a, b: tb.gradient(0.5 * (a + b))  # noqa: E731  exact for quadratics
    return solution_bias(impl, naive, C, wealth=tb.objective)


# ---------------------------------------------------------------------------
# cad
# ---------------------------------------------------------------------------


def run_cad(cfg, seed, n_paths, threads) -> ExperimentResult:
    p = _params(cfg, {
        "impact": 1.0, "temp_impact": 1e-3, "l1_cost": 0.0, "n_steps": 50, "eps_grid": [0.0, 1.0],
        "surplus_share": 0.5, "share_grid": [0.002, 0.004, 0.006, 0.008, 0.01], "n_pilot": 2000,
        "fd_eps": 0.05, "fd_speed": 0.5, "utility_curvature": 0.0,
    })
    m = cfg.market
    base = geometric_brownian(m.drift, m.vol)
    grid = PathGrid(m.horizon, int(p["n_steps"]))
    c = p["impact"]

    def model_for_share(share):
        return CadModel(base, lambda t, y, phi, v: c * v * y, scale=1.0,
                        drift_sens=lambda t, y, phi, v: c * y[:, :, None])

    gain = SeparableGain(drift=[0.0], l1_cost=p["l1_cost"], temp_impact=p["temp_impact"])
    U = QuadraticUtility(1.0, p["utility_curvature"])
    y0 = [m.y0]
    eps_rep = surplus_and_scan(model_for_share, gain, lambda s: FeasibleSet(speed_cap=s), grid, y0, U,
                               p["eps_grid"], [p["surplus_share"]], n_paths, seed, n_pilot=int(p["n_pilot"]))
    share_rep = surplus_and_scan(model_for_share, gain, lambda s: FeasibleSet(speed_cap=s), grid, y0, U,
                                 [1.0], p["share_grid"], n_paths, seed + 1, n_pilot=int(p["n_pilot"]))
    fd = finite_difference_check(model_for_share(1.0), p["fd_speed"], grid, y0, U, p["fd_eps"], n_paths, seed + 2)
    res = ExperimentResult(n_paths=n_paths)
    cols = ["epsilon", "share_scale", "delta", "ci_low", "ci_high", "surplus_fraction", "chi_norm"]

    def rows_of(rep):
        return [[r.epsilon, r.share_scale, r.delta, r.ci[0], r.ci[1], r.surplus_fraction, r.chi_norm]
                for r in rep.rows]

    res.add("cad_eps.csv", cols, rows_of(eps_rep))
    res.add("cad_share.csv", cols, rows_of(share_rep))
    res.add("cad_fd.csv", ["fd", "fd_se", "mc", "mc_se"], [[fd["fd"], fd["fd_se"], fd["mc"], fd["mc_se"]]])
    pvals = []
    for r in eps_rep.rows:
        se = (r.ci[1] - r.ci[0]) / (2 * 1.96)
        pvals.append(float(stats.norm.sf(r.delta / se)) if se > 0 else (0.0 if r.delta > 0 else 1.0))
    res.summary = {
        "eps": eps_rep.to_records(), "eps_p_positive": pvals, "share": share_rep.to_records(),
        "slope": share_rep.slope, "slope_ci": list(share_rep.slope_ci), "slope_p": share_rep.slope_p,
        "intercept": share_rep.intercept, "intercept_ci": list(share_rep.intercept_ci),
        "fd": fd["fd"], "mc": fd["mc"], "fd_combined_se": fd["combined_se"],
    }
    return res


RUNNERS = {
    "simulate": run_simulate,
    "mo-run": run_mo,
    "rl-run": run_rl,
    "converge": run_converge,
    "dominance": run_dominance,
    "audit": run_audit,
    "cad": run_cad,
}


def run_experiment(name: str, cfg: ScenarioConfig, seed: int, n_paths: int, threads: int = 1) -> ExperimentResult:
    if name not in RUNNERS:
        raise ConfigurationError(f"unknown experiment {name!r}")
    return RUNNERS[name](cfg, int(seed), int(n_paths), int(threads))
