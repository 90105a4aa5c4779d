"""End-to-end acceptance run: one test per criterion, each printing a PASS/FAIL line.

Criteria 1, 8, 9 and 10 are library-level oracle checks; the others run the
command-line harness in-process and read its manifests and CSV/JSON outputs.
"""

import csv
import json

import numpy as np
import pytest
import yaml

from myopic_lab.harness.cli import main
from myopic_lab.mo import solve_soft_threshold, kkt_residual, transient_convolution, volterra_adjoint
from myopic_lab.phantom import positive_bias_prob
from myopic_lab.risk import bpoe, cvar_ru, entropic_risk
from myopic_lab.sde import (PathGrid, SdeModel, convert_drift, flow_jacobians_batch, geometric_brownian,
                            simulate_paths, simulate_terminal)

pytestmark = pytest.mark.slow

SEED = 20240601


def _run(tmp, command, cfg, seed=SEED, extra=()):
    d = tmp / command
    d.mkdir(parents=True, exist_ok=True)
    cpath = d / "in.yaml"
    cpath.write_text(yaml.safe_dump(cfg))
    out = d / "out"
    code = main([command, "--config", str(cpath), "--seed", str(seed), "--out", str(out), *extra])
    assert code == 0, f"{command} exited with {code}"
    return out, json.loads((out / f"{command}.json").read_text())


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def converge(workdir):
    cfg = {"experiment": {"params": {"floor_steps": [1e-3, 1e-2, 1e-1],
                                     "rate_checkpoints": [100, 300, 1000, 3000, 10000]}}}
    return _run(workdir, "converge", cfg)


# ---------------------------------------------------------------------------


def test_c01_normal_proxy_table(criterion):
    c = criterion(1, "normal-proxy sign probability table")
    table = {0.3: 0.62, 0.5: 0.69, 0.7: 0.76, 1.0: 0.84, 1.3: 0.90, 1.6: 0.95}
    x = np.random.default_rng(SEED).standard_normal(1000)
    x = (x - x.mean()) / x.std(ddof=1)
    for z, expected in table.items():
        p = positive_bias_prob(x + z, np.zeros_like(x), method="normal_proxy")
        c.check(f"z={z}: {p:.4f}", abs(p - expected) <= 0.005)
    c.finish()


def test_c02_mo_geometric_convergence(criterion, converge):
    _, s = converge
    c = criterion(2, "MO geometric convergence")
    c.check(f"contraction {s['mo_contraction']:.3f} <= 0.92", s["mo_contraction"] <= 0.92)
    c.check(f"log-gap R2 {s['mo_log_r2']:.5f} >= 0.99", s["mo_log_r2"] >= 0.99)
    c.finish()


def test_c03_rl_variance_floor(criterion, converge):
    out, s = converge
    rows = _csv(out / "floor.csv")
    c = criterion(3, "RL variance floor")
    c.check(f"log-log slope {s['floor_loglog_slope']:.3f} in 1 +- 0.15", abs(s["floor_loglog_slope"] - 1) <= 0.15)
    largest = max(rows, key=lambda r: float(r["eta"]))
    scale = float(largest["predicted"])
    ratio = float(largest["plateau"]) / scale
    c.check(f"largest-eta plateau/prediction {ratio:.3f} >= 0.1", ratio >= 0.1)
    c.check("all plateaus positive", all(float(r["plateau"]) > 0 for r in rows))
    c.finish()


def test_c04_decreasing_step_rate(criterion, converge):
    _, s = converge
    c = criterion(4, "decreasing-step rate")
    c.check(f"log-log slope {s['rate_loglog_slope']:.3f} in -1 +- 0.2", abs(s["rate_loglog_slope"] + 1) <= 0.2)
    c.finish()


def test_c05_gap_ratio_divergence(criterion, converge):
    _, s = converge
    c = criterion(5, "gap-ratio divergence")
    c.check("gamma increasing after burn-in", s["gamma_increasing_after_burn_in"])
    c.check(f"gamma(200)/gamma(50) {s['gamma_200_over_50']:.3g} > 10", s["gamma_200_over_50"] > 10)
    c.finish()


def test_c06_dominance(criterion, workdir):
    c = criterion(6, "dominance suite (n=1e5, paired)")
    base = {"market": {"vol": 1.0}, "policy": {"signal": 0.5, "step": 0.2}}
    for mode in ("taker", "trained", "maker"):
        cfg = dict(base, experiment={"n_paths": 100_000, "params": {"mode": mode}})
        _, s = _run(workdir / mode, "dominance", cfg)
        for k in ("mean", "variance", "cvar", "positivity"):
            c.check(f"{mode} {k} p={s['p_values'][k]:.2g}", s["p_values"][k] < 0.01)
        if mode in ("taker", "trained"):
            rel = s["mean_gap"] / s["predicted_mean_gap"] - 1
            c.check(f"{mode} mean gap {s['mean_gap']:.4f} vs {s['predicted_mean_gap']:.4f}", abs(rel) <= 0.2)
    c.finish()


def test_c07_phantom_audit(criterion, workdir):
    out, s = _run(workdir, "audit", {"experiment": {"n_paths": 20000}})
    c = criterion(7, "phantom-profit audit")
    adapted = _csv(out / "phantom_adapted.csv")
    c.check(f"adapted |pi| < 3 SE over {len(adapted)} seeds",
            len(adapted) >= 20 and s["adapted_all_within_3se"])
    c.check(f"look-ahead slope {s['slope_vs_dt']:.3g} > 0", s["slope_vs_dt"] > 0)
    c.check(f"R2 {s['r2']:.4f} >= 0.9", s["r2"] >= 0.9)
    c.check("2x2 additivity within 95% CI", s["additive"])
    ratio = s["self_bias_ratio_smallest"]
    c.check(f"B_self / pi_impl {ratio:.3f} within 30%", abs(ratio - 1) <= 0.3)
    c.finish()


def test_c08_risk_oracles(criterion):
    c = criterion(8, "risk oracles")
    r = np.random.default_rng(SEED)
    x = r.standard_normal(1_000_000)
    cv = cvar_ru(x, 0.95)
    c.check(f"CVaR {cv:.4f} vs 2.0627", abs(cv - 2.0627) <= 1e-2)
    y = r.standard_normal(5000)
    worst = max(abs(bpoe(y, cvar_ru(y, a)) - (1 - a)) for a in (0.5, 0.8, 0.9, 0.95, 0.99))
    c.check(f"bPOE inverse {worst:.1e} <= 1e-6", worst <= 1e-6)
    mu, sig, gam = 0.2, 1.5, 0.5
    z = mu + sig * r.standard_normal(1_000_000)
    e = entropic_risk(z, gam)
    w = np.exp(gam * (z - z.max()))
    se = w.std(ddof=1) / (np.sqrt(z.size) * w.mean()) / gam
    c.check(f"entropic {e:.4f} vs {mu + gam * sig**2 / 2:.4f} (3 SE = {3 * se:.4f})",
            abs(e - (mu + gam * sig**2 / 2)) <= 3 * se)
    c.finish()


def test_c09_sde_weak_accuracy(criterion):
    c = criterion(9, "SDE weak accuracy and identities")
    mu, sig, T = 0.1, 0.3, 1.0
    yT, _ = simulate_terminal(geometric_brownian([mu], [sig]), PathGrid(T, 256), [1.0], 100_000, SEED)
    yT = yT[:, 0] if yT.ndim > 1 else yT
    m, v = np.exp(mu * T), np.exp(2 * mu * T) * (np.exp(sig**2 * T) - 1)
    se_m = np.sqrt(v / yT.size)
    se_v = np.sqrt((np.mean((yT - yT.mean()) ** 4) - yT.var() ** 2) / yT.size)
    c.check(f"GBM mean within 3 SE ({(yT.mean() - m) / se_m:+.2f})", abs(yT.mean() - m) <= 3 * se_m)
    c.check(f"GBM variance within 3 SE ({(yT.var(ddof=1) - v) / se_v:+.2f})", abs(yT.var(ddof=1) - v) <= 3 * se_v)

    R = np.array([[1.0, 0.3], [0.3, 1.0]])
    model = SdeModel(2, 2, lambda t, y: np.stack([np.sin(y[..., 0]) + y[..., 1], -y[..., 0] * y[..., 1]], -1),
                     lambda t, y: np.stack([np.stack([1 + 0.2 * y[..., 0] ** 2, 0.3 * y[..., 1]], -1),
                                            np.stack([0.1 * y[..., 0], 0.5 + 0.1 * y[..., 1] ** 2], -1)], -2),
                     correlation=R)
    worst = 0.0
    for pt in np.random.default_rng(1).uniform(-1, 1, (20, 2)):
        probe = (0.0, pt)
        back = convert_drift(model, "strat_to_ito", probe, drift=convert_drift(model, "ito_to_strat", probe))
        worst = max(worst, float(np.max(np.abs(back - model.drift_ito(*probe)))))
    c.check(f"Ito-Stratonovich round trip {worst:.1e} <= 1e-10", worst <= 1e-10)

    gbm = geometric_brownian([0.05], [0.4])
    grid = PathGrid(1.0, 256)
    b = simulate_paths(gbm, grid, [2.0], 500, SEED)
    J = flow_jacobians_batch(gbm, grid, b.states, b.increments, anchor=64)
    rel = np.max(np.abs(J[:, -1, 0, 0] / (b.states[:, -1, 0] / b.states[:, 64, 0]) - 1))
    c.check(f"flow identity rel {rel:.1e} <= 1e-4", rel <= 1e-4)
    c.finish()


def test_c10_myopic_controller(criterion):
    c = criterion(10, "myopic controller")
    r = np.random.default_rng(SEED)
    Xi = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 0.5]])
    lam = np.array([0.5, 1.0, 0.2])
    inside = [solve_soft_threshold(r.uniform(-1, 1, 3) * lam, Xi, lam) for _ in range(200)]
    c.check("no-trade wedge exact zero", all(np.all(v == 0.0) for v in inside))

    grid = PathGrid(1.0, 60)
    kernel = lambda lag: np.array([[0.7, 0.1], [0.0, 0.4]]) * np.exp(-2.0 * lag)  # noqa: E731
    n = grid.n_steps + 1
    A = np.zeros((n * 2, n * 2))
    for j in range(n):
        for a in range(2):
            e = np.zeros((n, 2))
            e[j, a] = 1.0
            A[:, j * 2 + a] = transient_convolution(kernel, 0.3, e, grid).ravel()
    s = r.standard_normal((n, 2))
    p = volterra_adjoint(kernel, 0.3, s, grid).p
    brute = (A[: (n - 1) * 2].T @ s[:-1].ravel()).reshape(n, 2)
    err = float(np.max(np.abs(p - brute)))
    c.check(f"Volterra adjoint vs brute force {err:.1e} <= 1e-8", err <= 1e-8)
    c.check("p_T == 0 exactly", np.all(p[-1] == 0.0))

    worst = 0.0
    for seed in range(20):
        rs = np.random.default_rng(seed)
        a = rs.standard_normal((3, 3))
        X = a @ a.T + 3 * np.eye(3)
        d = 3 * rs.standard_normal(3)
        l1 = rs.uniform(0, 1, 3)
        v = solve_soft_threshold(d, X, l1)
        worst = max(worst, kkt_residual(d - X @ v, v, l1=l1))
    c.check(f"KKT residual {worst:.1e} <= 1e-6", worst <= 1e-6)
    c.finish()


def test_c11_cad_lab(criterion, workdir):
    cfg = {"market": {"model": "gbm", "drift": 0.0, "vol": 0.2, "y0": 1.0}, "experiment": {"n_paths": 4000}}
    _, s = _run(workdir, "cad", cfg)
    c = criterion(11, "CAD lab")
    eps0 = next(r for r in s["eps"] if r["epsilon"] == 0.0)
    c.check(f"eps=0 CI {eps0['ci']} contains 0", eps0["ci"][0] <= 0.0 <= eps0["ci"][1])
    pos = [(r["epsilon"], p) for r, p in zip(s["eps"], s["eps_p_positive"]) if r["epsilon"] > 0]
    c.check(f"surplus scenario delta > 0 with p {[f'{p:.1g}' for _, p in pos]} < 0.01",
            pos and all(p < 0.01 for _, p in pos))
    c.check(f"intercept CI {[round(x, 6) for x in s['intercept_ci']]} contains 0",
            s["intercept_ci"][0] <= 0.0 <= s["intercept_ci"][1])
    c.check(f"slope {s['slope']:.3g} > 0 (p {s['slope_p']:.1g})", s["slope"] > 0 and s["slope_p"] < 0.01)
    c.finish()


SMALL = {
    "simulate": {"experiment": {"n_paths": 200}},
    "mo-run": {"experiment": {"n_paths": 100}},
    "rl-run": {"policy": {"max_iter": 50}},
    "converge": {"experiment": {"params": {"mo_iter": 60, "rl_iter": 220, "replicas": 10}}},
    "dominance": {"experiment": {"n_paths": 500, "params": {"n_boot": 20}}},
    "audit": {"experiment": {"n_paths": 500, "params": {"adapted_seeds": 2, "self_bias_eval_paths": 500,
                                                        "self_bias_iter": 10, "sol_replicas": 20}}},
    "cad": {"experiment": {"n_paths": 200, "params": {"n_pilot": 100, "share_grid": [0.004, 0.008]}}},
}


def test_c12_determinism(criterion, tmp_path):
    c = criterion(12, "byte-identical reruns")
    for command, cfg in SMALL.items():
        outs = [_run(tmp_path / f"{command}-{i}", command, cfg, seed=99)[0] for i in range(2)]
        files = sorted(p.name for p in outs[0].glob("*.csv"))
        same = bool(files) and all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        c.check(f"{command} ({len(files)} CSVs)", same)
    c.finish()
