"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its pinned tolerance.

Heavy criteria (toy pipeline, segway) run the command-line tool end to end in a
temporary directory.
"""
import json
import os
import time
from math import comb

import numpy as np
import pytest
from scipy.spatial import cKDTree

from acceptance_log import record
from fiode import cli
from fiode.cbf_qp import ClassK, QpProblem, is_degenerate, qp_jacobians, solve_batch, solve_cbf_qp
from fiode.models import ClassifierModel, deserialize_model, serialize_model
from fiode.network import flat_grads, flat_params, set_flat_params
from fiode.ode import FilteredDynamics, IntegratorConfig, predict, rollout
from fiode.sampling import brute_force_boundary, sample_decision_boundary, sample_simplex_grid
from fiode.simplex import Margin, uniform_point
from fiode.train import (SamplingScheduler, TrainConfig, adaptive_kappa, evaluation_states, lyapunov_loss,
                         train_classifier)
from fiode.verify import IntervalBox, crown_dense_bounds, interval_forward, qp_interval_bounds
from fiode.verify.certify import kappa_min, min_horizon
from oracles import qp_breakpoints, qp_dykstra, random_boundary_points
from qp_instances import kkt_residual, random_instances
from test_verify import random_net

pytestmark = pytest.mark.acceptance

# pinned tolerances and limits
QP_ORACLE_TOL = 1e-6
KKT_TOL = 1e-8
QP_TIME = 60.0
JAC_TOL = 1e-4
JAC_TIME = 60.0
SAMPLER_TIME = 120.0
BOUNDS_TIME = 300.0
GRAD_TOL = 1e-4
GRAD_TIME = 120.0
LOSS_RATIO = 0.10
CERT_FRACTION = 0.50
ATTACKS = 1000
PIPELINE_TIME = 900.0
DECAY_SLACK = 1e-6
SEGWAY_TIME = 1200.0
ANCHOR_TOL = 1e-9

THREADS = os.cpu_count() or 1
ALPHA = ClassK()


def test_qp_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    inst = random_instances(rng, 10_000)
    sols = [solve_cbf_qp(QpProblem(*i)) for i in inst]
    kkt = max(kkt_residual(s.f, s.lam, *i) for s, i in zip(sols, inst))
    err_bp = max(np.max(np.abs(s.f - qp_breakpoints(*i)[0])) for s, i in zip(sols, inst))
    err_proj = 0.0
    for n in range(2, 11):
        idx = [k for k, i in enumerate(inst) if i[0].size == n]
        F, L, U = (np.array([inst[k][j] for k in idx]) for j in range(3))
        B = np.array([inst[k][3] for k in idx])
        ref = qp_dykstra(F, L, U, B, iters=20_000)
        err_proj = max(err_proj, np.max(np.abs(ref - np.array([sols[k].f for k in idx]))))
    dt = time.perf_counter() - t0
    ok = err_proj <= QP_ORACLE_TOL and err_bp <= QP_ORACLE_TOL and kkt < KKT_TOL and dt < QP_TIME
    assert record("QP oracle equivalence", ok,
                  f"10^4 instances, projection oracle err {err_proj:.2e}, breakpoint oracle err {err_bp:.2e} "
                  f"(tol {QP_ORACLE_TOL}), max KKT {kkt:.2e} (tol {KKT_TOL}), {dt:.1f}s (limit {QP_TIME:.0f}s)")


def _fd_jacobians(prob, h=1e-6):
    n = prob.f_hat.size
    out = []
    for which in range(3):
        J = np.zeros((n, n))
        for j in range(n):
            if which == 2 and not np.isfinite(prob.upper[j]):
                continue
            args_p = [prob.f_hat.copy(), prob.lower.copy(), prob.upper.copy()]
            args_m = [prob.f_hat.copy(), prob.lower.copy(), prob.upper.copy()]
            args_p[which][j] += h
            args_m[which][j] -= h
            J[:, j] = (solve_cbf_qp(QpProblem(*args_p, prob.b)).f - solve_cbf_qp(QpProblem(*args_m, prob.b)).f) / (2 * h)
        out.append(J)
    return out


def test_qp_jacobians():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    checked, worst = 0, 0.0
    while checked < 1000:
        for f_hat, lower, upper, b in random_instances(rng, 200):
            prob = QpProblem(f_hat, lower, upper, b)
            sol = solve_cbf_qp(prob)
            if is_degenerate(prob, sol, tol=1e-4) or checked >= 1000:
                continue
            for J, F in zip(qp_jacobians(prob, sol), _fd_jacobians(prob)):
                worst = max(worst, np.max(np.abs(J - F)))
            checked += 1
    dt = time.perf_counter() - t0
    ok = worst <= JAC_TOL and dt < JAC_TIME
    assert record("QP Jacobians", ok, f"{checked} non-degenerate instances, max |analytic - FD| {worst:.2e} "
                                      f"(tol {JAC_TOL}), {dt:.1f}s (limit {JAC_TIME:.0f}s)")


def test_sampler_exactness():
    t0 = time.perf_counter()
    card_bad = [(n, d) for n in range(2, 7) for d in range(1, 13)
                if sample_simplex_grid(n, d).points.shape[0] != comb(d + n - 1, n - 1)]
    dp_bad, dp_cases = [], 0
    for n in range(2, 6):
        for d in range(2, 13, 2):
            if d % n == 1:
                continue
            for y in range(n):
                dp_cases += 1
                a = np.rint(sample_decision_boundary(n, d, y).points * d).astype(int)
                b = brute_force_boundary(n, d, y)
                if a.shape != b.shape or not np.array_equal(np.unique(a, axis=0), np.unique(b, axis=0)):
                    dp_bad.append((n, d, y))
    rng = np.random.default_rng(303)
    grid_viol = 0
    for n, d in [(3, 10), (4, 6), (5, 4)]:
        dist, _ = cKDTree(sample_simplex_grid(n, d).points).query(rng.dirichlet(np.ones(n), 100_000), p=np.inf)
        grid_viol += int(np.sum(dist > 1 / d + 1e-12))
    bnd_viol = 0
    for n, d, y in [(3, 20, 0), (4, 10, 2), (5, 8, 4)]:
        pts = sample_decision_boundary(n, d, y).points
        dist, _ = cKDTree(pts).query(random_boundary_points(rng, n, y, 100_000), p=np.inf)
        bnd_viol += int(np.sum(dist > 1 / d + 1e-12))
    dt = time.perf_counter() - t0
    ok = not card_bad and not dp_bad and grid_viol == 0 and bnd_viol == 0 and dt < SAMPLER_TIME
    assert record("Sampler exactness", ok,
                  f"cardinality mismatches {len(card_bad)}/60, DP vs brute force mismatches {len(dp_bad)}/{dp_cases}, "
                  f"covering violations grid {grid_viol} boundary {bnd_viol} over 10^5 points each, "
                  f"{dt:.1f}s (limit {SAMPLER_TIME:.0f}s)")


def test_bound_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    ibp_v = crown_v = qp_v = 0
    for _ in range(20):
        net = random_net(rng, [3, 24, 24, 2])
        c = rng.uniform(-1, 1, 3)
        box = IntervalBox(c - rng.uniform(0, 0.5, 3), c + rng.uniform(0, 0.5, 3))
        vals = net(box.sample(rng, 10_000))
        ibp = interval_forward(net, box)
        _, cr = crown_dense_bounds(net, box)
        ibp_v += int(np.sum((vals < ibp.lower) | (vals > ibp.upper)))
        crown_v += int(np.sum((vals < cr.lower) | (vals > cr.upper)))
    for _ in range(20):
        n = int(rng.integers(2, 8))
        eta = rng.dirichlet(np.ones(n))
        ebox = IntervalBox(np.clip(eta - 0.05, 0, 1), np.clip(eta + 0.05, 0, 1))
        fbox = IntervalBox.around(rng.normal(0, 2, n), rng.uniform(0.05, 0.5))
        out = qp_interval_bounds(ebox, fbox, ALPHA)
        f, _ = solve_batch(fbox.sample(rng, 10_000), -ALPHA(ebox.sample(rng, 10_000)))
        qp_v += int(np.sum((f < out.lower) | (f > out.upper)))
    order_v = 0
    for _ in range(1000):
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(1, 6))] + [int(rng.integers(2, 20)) for _ in range(depth)] + [int(rng.integers(1, 4))]
        net = random_net(rng, dims)
        c = rng.uniform(-1, 1, dims[0])
        box = IntervalBox(c - rng.uniform(0, 1, dims[0]), c + rng.uniform(0, 1, dims[0]))
        _, cr = crown_dense_bounds(net, box)
        ibp = interval_forward(net, box)
        order_v += int(not (np.all(cr.lower >= ibp.lower) and np.all(cr.upper <= ibp.upper)))
    dt = time.perf_counter() - t0
    ok = ibp_v == crown_v == qp_v == order_v == 0 and dt < BOUNDS_TIME
    assert record("Bound soundness", ok,
                  f"containment violations IBP {ibp_v}, CROWN {crown_v}, QP {qp_v} (20 boxes x 10^4 samples each); "
                  f"CROWN not within IBP on {order_v}/1000 nets; {dt:.1f}s (limit {BOUNDS_TIME:.0f}s)")


def test_gradient_integrity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    worst, h = 0.0, 1e-6
    for seed in range(5):
        model = ClassifierModel.init(np.random.default_rng(seed), 3, 2, hidden=12, orthogonal=bool(seed % 2))
        E = rng.dirichlet(np.ones(3), size=16)
        X = rng.normal(size=(16, 2))
        y = rng.integers(0, 3, size=16)

        def loss():
            return lyapunov_loss(model, "margin", 0.5, E, X, y)

        res = loss()
        if res.skipped:
            continue
        theta = flat_params(model.net).copy()
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            set_flat_params(model.net, theta + e)
            up = loss().loss
            set_flat_params(model.net, theta - e)
            fd[i] = (up - loss().loss) / (2 * h)
        set_flat_params(model.net, theta)
        worst = max(worst, np.linalg.norm(flat_grads(res.grads) - fd) / np.linalg.norm(fd))
    dt = time.perf_counter() - t0
    ok = worst <= GRAD_TOL and dt < GRAD_TIME
    assert record("Gradient integrity", ok, f"max relative error {worst:.2e} over 5 models "
                                            f"(tol {GRAD_TOL}), {dt:.1f}s (limit {GRAD_TIME:.0f}s)")


# --------------------------------------------------------------------------
# toy classification pipeline
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    t0 = time.perf_counter()
    out = tmp_path_factory.mktemp("toy")
    cfg = cli.resolve_config()
    (X, y), (Xt, yt) = cli._datasets(cfg)
    t = cfg["train"]
    model = ClassifierModel.init(np.random.default_rng(cfg["seed"]), 3, 2, hidden=t["hidden"],
                                 orthogonal=t["orthogonal"], integrator=IntegratorConfig(**cfg["integrator"]),
                                 potential="margin")
    E, Xe, ye = evaluation_states(model, X, y)
    before = lyapunov_loss(model, "margin", adaptive_kappa(model, t["eps"], "margin"), E, Xe, ye).loss
    tc = TrainConfig(lr=t["lr"], iterations=t["iterations"], eps=t["eps"], seed=cfg["seed"])
    model, _ = train_classifier(model, (X, y), tc, SamplingScheduler(tc.iterations))
    after = lyapunov_loss(model, "margin", model.kappa, E, Xe, ye).loss
    serialize_model(model, out / "model.json")
    conf = {"certify": {"eps": 0.05, "density": 20, "mode": "crown", "potential": "margin", "max_points": 150}}
    (out / "config.json").write_text(json.dumps(conf))
    code = cli.main(["certify-classifier", "--config", str(out / "config.json"), "--out", str(out),
                     "--model", str(out / "model.json"), "--threads", str(THREADS)])
    report = json.loads((out / "report.json").read_text())
    correct = predict(model, Xt) == yt
    Xc, yc = Xt[correct][:150], yt[correct][:150]
    return {"model": deserialize_model(out / "model.json"), "before": before, "after": after, "code": code,
            "report": report, "X": Xc, "y": yc, "start": t0}


def test_toy_pipeline(toy_run):
    model, report = toy_run["model"], toy_run["report"]
    ratio = toy_run["after"] / toy_run["before"]
    points = report["details"]["points"]
    cert = [p["index"] for p in points if p["verdict"] == "Certified"]
    frac = len(cert) / len(points)
    rng = np.random.default_rng(606)
    broken = 0
    for i in cert:
        d = rng.standard_normal((ATTACKS, 2))
        d *= (0.05 * np.sqrt(rng.random(ATTACKS)) / np.linalg.norm(d, axis=1))[:, None]
        broken += int(np.sum(predict(model, toy_run["X"][i] + d) != toy_run["y"][i]))
    dt = time.perf_counter() - toy_run["start"]
    ok = ratio < LOSS_RATIO and frac >= CERT_FRACTION and broken == 0 and dt < PIPELINE_TIME
    assert record("Toy classification pipeline", ok,
                  f"loss ratio {ratio:.4f} (limit {LOSS_RATIO}), certified {len(cert)}/{len(points)} = {frac:.3f} "
                  f"(min {CERT_FRACTION}) at eps 0.05, counterexamples {broken} over {ATTACKS} attacks per point, "
                  f"{dt:.1f}s (limit {PIPELINE_TIME:.0f}s)")


def test_exponential_decay(toy_run):
    model = toy_run["model"]
    points = toy_run["report"]["details"]["points"]
    cert = np.array([p["index"] for p in points if p["verdict"] == "Certified"])
    X, y = toy_run["X"][cert], toy_run["y"][cert]
    E0 = np.tile(uniform_point(model.n), (len(X), 1))
    traj = rollout(FilteredDynamics(model.net, X, model.alpha), E0, model.integrator, simplex=True)
    V = np.stack([Margin(int(yi), model.n).value(traj.states[:, i]) for i, yi in enumerate(y)], axis=1)
    env = V[0] * np.exp(-model.kappa * traj.times)[:, None] + DECAY_SLACK
    excess = float(np.max(V - env))
    bad = int(np.sum(np.any(V > env, axis=0)))
    assert record("Exponential decay", bad == 0,
                  f"{bad}/{len(X)} certified trajectories exceed V(0)exp(-kappa t) + {DECAY_SLACK}; "
                  f"max excess {excess:.2e}, kappa {model.kappa:.4f}")


# --------------------------------------------------------------------------
# segway
# --------------------------------------------------------------------------

def test_segway(tmp_path):
    t0 = time.perf_counter()
    out = str(tmp_path)
    codes = [cli.main([cmd, "--out", out, "--threads", str(THREADS)])
             for cmd in ("train-controller", "certify-controller")]
    report = json.loads((tmp_path / "report.json").read_text())
    level = deserialize_model(tmp_path / "model.json").level
    codes.append(cli.main(["rollout", "--out", out]) if level is not None else None)
    summary = json.loads((tmp_path / "rollout_summary.json").read_text()) if level is not None else {}
    exits = summary.get("exits")
    dt = time.perf_counter() - t0
    ok = (codes == [0, 0, 0] and report["verdict"] == "Certified" and level is not None and level > 0
          and summary.get("trajectories") == 100 and exits == 0 and dt < SEGWAY_TIME)
    assert record("Segway invariant set", ok,
                  f"certified level {level}, {report['samples']} boxes, {exits} exits over "
                  f"{summary.get('trajectories')} trajectories of {summary.get('horizon')}s, "
                  f"{dt:.1f}s (limit {SEGWAY_TIME:.0f}s)")


def test_arithmetic_anchors():
    k = kappa_min(0.1, 1.0, 1.0, 0.5)
    v0 = 2 / 3
    t = min_horizon(1.0, 0.5, v0, 0.2, 1.0, 1.0)
    expect = -np.log(0.3 / (v0 - 0.2))
    ok = abs(k - 0.2) <= ANCHOR_TOL and abs(t - expect) <= ANCHOR_TOL and abs(t - 0.4418) < 5e-5
    assert record("Arithmetic anchors", ok, f"kappa_min {k!r} (expect 0.2), T_min {t:.10f} "
                                            f"(expect {expect:.10f} ~ 0.4418), tol {ANCHOR_TOL}")
