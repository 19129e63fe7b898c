"""End-to-end acceptance checks.

Each test records one PASS/FAIL line that is printed in the terminal summary
(see ``conftest.py``).  The long closed-loop runs are shared between
criteria through module-scoped fixtures.
"""

import math
import time

import numpy as np
import pytest

from covmpc.config import DensitySpec, ExperimentConfig, preset
from covmpc.coordinator import run_lloyd_periodic, run_mpc
from covmpc.density import gaussian_static, mass_centroid
from covmpc.dynamics import SingleIntegrator2D
from covmpc.geometry import ConvexPolygon, contains, erode, partition_sequence, voronoi_partition
from covmpc.nlp import check_gradients
from covmpc.planner import coupling_budget, plan_periodic_coupled, shift, steady_plan
from covmpc.plots import moving_average
from covmpc.tracker import (
    TrackerConstants,
    _problem,
    candidate_trajectory,
    closed_loop_step,
    finite_update_bounds,
    n_star,
    n_star_raw,
    solve_tracking,
    stage_cost,
    tau_steps,
)
from oracles import lloyd_oracle, tracking_qp_oracle

P0 = [[1.2, 0.3], [-0.4, 1.1], [-1.0, -0.9], [0.6, -1.3]]
LONG = 1000


@pytest.fixture
def verdict(acceptance_results):
    """``verdict(label, ok, detail)`` records the line and asserts ``ok``."""

    def record(label, ok, detail=""):
        acceptance_results.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        assert ok, f"{label}: {detail}"

    return record


def _run(name, steps=LONG, **overrides):
    cfg = preset(name)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    fleet = cfg.fleet()
    return cfg, fleet, run_mpc(fleet, steps=steps)


@pytest.fixture(scope="module")
def periodic_run():
    return _run("periodic_desk")


@pytest.fixture(scope="module")
def nonperiodic_run():
    return _run("nonperiodic_desk")


@pytest.fixture(scope="module")
def waypoint_runs():
    return {K: _run("waypoint_desk", K=K) for K in (5, 10)}


# -- 1 -----------------------------------------------------------------------------------------


def test_c01_lloyd_equivalence(verdict):
    cfg = ExperimentConfig(
        mode="LLOYD_PERIODIC", T=1, M=4, initial_positions=P0, density=DensitySpec(kind="uniform"), conv_tol=1e-12, max_iters=500
    )
    start = time.perf_counter()
    log = run_lloyd_periodic(cfg.fleet())
    elapsed = time.perf_counter() - start
    final = np.array([p.positions[0] for p in log.plans])
    err = float(np.linalg.norm(final - lloyd_oracle(P0), axis=1).max())
    verdict("C1 Lloyd equivalence", err <= 1e-3 and elapsed < 10, f"max error {err:.2e} m, {elapsed:.1f} s")


# -- 2 -----------------------------------------------------------------------------------------


def test_c02_lloyd_descent(verdict):
    worst = -np.inf
    for seed in range(10):
        cfg = preset("lloyd_desk")
        cfg.T, cfg.M, cfg.seed, cfg.max_iters = 10, 3, seed, 15
        cfg.density.period = 10
        trace = np.asarray(run_lloyd_periodic(cfg.fleet()).cost_trace)
        worst = max(worst, float(np.diff(trace).max()))
    verdict("C2 periodic cost descent", worst <= 1e-6, f"largest increase {worst:.2e} over 10 seeds")


# -- 3 -----------------------------------------------------------------------------------------


def test_c03_collision_avoidance(verdict, periodic_run):
    cfg, _, log = periodic_run
    dmin = min(s.min_distance for s in log.steps)
    outside = sum(not s.in_own_cell for s in log.steps)
    ok = log.aborted is None and len(log.steps) == LONG and dmin >= 2 * cfg.r_max - 1e-9 and outside == 0
    verdict("C3 collision avoidance", ok, f"min distance {dmin:.4f} m (limit {2 * cfg.r_max:.3f}), {outside} steps outside own cell")


# -- 4 -----------------------------------------------------------------------------------------


def test_c04_recursive_feasibility(verdict, periodic_run, waypoint_runs):
    runs = {"periodic circle": periodic_run[2], "nonperiodic waypoints": waypoint_runs[5][2]}
    aborts = {k: v.aborted for k, v in runs.items() if v.aborted}
    full = all(len(v.steps) == LONG for v in runs.values())
    verdict("C4 recursive feasibility", not aborts and full, f"aborts {aborts or 0} over 2 x {LONG} steps")


# -- 5 -----------------------------------------------------------------------------------------


def test_c05_tracking_decrease(verdict):
    m = SingleIntegrator2D(0.1, 2.0, 1.0)
    c = TrackerConstants(np.eye(2), 0.1 * np.eye(2), 4.0, 0.2, 1.0, 2.5, 10, 5, m.lipschitz_f)
    T, N = 40, c.N
    ang = 2 * np.pi * np.arange(T + 1) / T
    P = 0.5 * np.c_[np.cos(ang), np.sin(ang)]
    U = np.diff(P, axis=0) / m.dt
    cell = erode(ConvexPolygon.box(-2, 2, -2, 2), 0.055)

    def seg(t, n):
        idx = [(t + k) % T for k in range(n)]
        return P[idx], U[idx]

    x, sol, V, ell = P[0] + np.array([0.3, -0.2]), None, [], []
    for t in range(200):
        rx, ru = seg(t, N + 1)
        warm = None if sol is None else candidate_trajectory(sol, seg(t - 1, N + 1)[1], m)
        sol = solve_tracking(m, x, rx, ru, [cell] * (N + 1), c, warm=warm)
        V.append(sol.value)
        ell.append(float(stage_cost(x, sol.first_input, rx[0], ru[0], c.Q, c.R)))
        x = closed_loop_step(m, x, sol)
    V, ell = np.array(V), np.array(ell)
    slack = float((V[1:] - V[:-1] + c.alpha_N * ell[:-1]).max())
    ratio = float((V / (c.decay ** np.arange(len(V)) * V[0])).max())
    ok = slack <= 1e-6 and ratio <= 1 + 1e-3 and V[0] <= c.V_max
    verdict("C5 tracking decrease", ok, f"max decrease slack {slack:.2e}, max V/(lambda^t V0) {ratio:.6f}")


# -- 6 -----------------------------------------------------------------------------------------


def test_c06_coupling_safety(verdict, periodic_run):
    cfg, fleet, log = periodic_run
    updates = len(log.update_values)
    worst = max(v for _, v in log.update_values)
    V_max = fleet.consts[0].V_max

    # zero budget: the coupled planner must hand back the shifted previous plan
    K, N = fleet.K, fleet.N
    shifted = [shift(p, K) for p in log.plans]
    W = partition_sequence(np.stack([p.positions for p in shifted], axis=1), fleet.arena, fleet.r_max, fleet.eps)
    exact = True
    for i, prev in enumerate(log.plans):
        plan = plan_periodic_coupled(fleet.models[i], W.for_agent(i), fleet.field, prev.t0 + K, prev, 0.0, K, N, fleet.settings)
        exact &= np.array_equal(plan.trajectory.states, shifted[i].trajectory.states)
        exact &= np.array_equal(plan.trajectory.inputs, shifted[i].trajectory.inputs)
    assert coupling_budget(V_max, V_max, fleet.consts[0].L_V, fleet.consts[0].decay, 0).value == 0.0
    ok = updates >= 20 and worst <= V_max + 1e-6 and exact
    verdict("C6 coupling safety", ok, f"{updates} updates, max post-update V {worst:.3e} (V_max {V_max:g}), zero budget exact: {exact}")


# -- 7 -----------------------------------------------------------------------------------------


def test_c07_finite_time_update(verdict, capsys):
    worked = tau_steps(1.0, 70.0, 0.95)
    with capsys.disabled():
        print(f"\ntau(V_eps=1, V_max=70, lambda=0.95) = {worked}")

    cfg = preset("periodic_desk")
    targets = np.array(P0)
    cfg.initial_positions = (targets + 0.6 * np.array([[0.5, 0.4], [-0.5, 0.3], [0.4, -0.5], [0.3, 0.5]])).tolist()
    fleet = cfg.fleet()
    fleet.pin_planner = True
    fleet.initial_plans = [steady_plan(m, q, fleet.T) for m, q in zip(fleet.models, targets)]
    consts = [c.with_lipschitz(m) for c, m in zip(fleet.consts, fleet.models)]
    V_eps, tau = finite_update_bounds(consts, fleet.eps, 1.0)
    log = run_mpc(fleet, steps=min(tau, 60) + 1)
    first = log.swap_times[0] if log.swap_times else None
    V0 = float(log.values[0].max())
    ok = worked == 83 and log.aborted is None and first is not None and first <= tau and V0 <= consts[0].V_max
    verdict("C7 finite-time update", ok, f"worked tau {worked}; first swap at step {first} <= tau {tau} (V0 {V0:.3f})")


# -- 8 -----------------------------------------------------------------------------------------


def test_c08_bound_calculators(verdict):
    raw = n_star_raw(1.0, 1.0, 2.0, 0.5)
    ns = n_star(TrackerConstants(np.eye(2), np.eye(2), 2.0, 0.5, 1.0, 1.0, 5, 5, 1.0))
    budget = coupling_budget(70.0, 70.0, 180.0, 0.95, 30).value
    V_eps, _ = finite_update_bounds(TrackerConstants(np.eye(2), np.eye(2), 2.0, 0.5, 1.0, 1.0, 5, 5, 1.0), 0.005, 1.0)
    ok = (
        ns == 2
        and abs(raw - 1.415) / 1.415 <= 1e-3
        and abs(budget - 0.30542) / 0.30542 <= 1e-4
        and abs(V_eps - 0.005**2 / 3.0) / (0.005**2 / 3.0) <= 1e-4
    )
    verdict("C8 bound calculators", ok, f"N* {ns} (raw {raw:.4f}), C(70) {budget:.5f}, V_eps {V_eps:.4e}")


# -- 9 -----------------------------------------------------------------------------------------


def test_c09_quadrature_and_voronoi(verdict):
    sigma = 0.3
    mass = mass_centroid(gaussian_static(sigma), ConvexPolygon.box(-2, 2, -2, 2), 0).mass
    rel = abs(mass - 2 * math.pi * sigma**2) / (2 * math.pi * sigma**2)

    rng = np.random.default_rng(0)
    gens = rng.uniform(-1.8, 1.8, (8, 2))
    cells = voronoi_partition(gens, ConvexPolygon.box(-2, 2, -2, 2))
    q = rng.uniform(-2, 2, (20000, 2))
    nearest = np.linalg.norm(q[:, None] - gens[None], axis=-1).argmin(axis=1)
    agree = float(np.mean([contains(cells[i], p, 1e-12) for p, i in zip(q, nearest)]))
    ok = rel <= 1e-4 and agree >= 0.999
    verdict("C9 quadrature and Voronoi", ok, f"mass rel error {rel:.2e}, grid agreement {100 * agree:.3f}%")


# -- 10 ----------------------------------------------------------------------------------------


def test_c10_k_trend(verdict, waypoint_runs):
    mean = {K: float(r[2].coverage_costs.mean()) for K, r in waypoint_runs.items()}
    ok = all(r[2].aborted is None for r in waypoint_runs.values()) and mean[5] <= mean[10]
    verdict("C10 K trend", ok, f"mean cost K=5 {mean[5]:.5f}, K=10 {mean[10]:.5f}")


# -- 11 ----------------------------------------------------------------------------------------


def test_c11_mode_gap(verdict, periodic_run, nonperiodic_run):
    cfg, _, per = periodic_run
    _, _, non = nonperiodic_run
    T = cfg.T
    ma_per = moving_average(per.coverage_costs, T)[-1]
    ma_non = moving_average(non.coverage_costs, T)[-1]
    cost = per.coverage_costs
    last, before = cost[-T:].mean(), cost[-2 * T : -T].mean()
    change = abs(last - before) / abs(before)
    ok = per.aborted is None and non.aborted is None and ma_non >= ma_per - 1e-6 and change < 1e-4
    verdict("C11 mode gap", ok, f"MA nonperiodic {ma_non:.5f} >= periodic {ma_per:.5f}; last-period change {change:.1e}")


# -- 12 ----------------------------------------------------------------------------------------


def test_c12_solver_soundness(verdict):
    m = SingleIntegrator2D(pos_bound=50.0, u_max=50.0)
    N = 10
    consts = TrackerConstants(np.eye(2), 0.1 * np.eye(2), 4.0, 0.2, 1.0, 2.5, N, 5, 1.1)
    big = erode(ConvexPolygon.box(-50, 50, -50, 50), 0.055)
    rng = np.random.default_rng(2024)
    worst = 0.0
    grads_ok = True
    for case in range(100):
        ur = rng.uniform(-0.5, 0.5, (N + 1, 2))
        xr = np.vstack([np.zeros(2), np.cumsum(m.dt * ur, axis=0)])[: N + 1] + rng.uniform(-1, 1, 2)
        x0 = xr[0] + rng.normal(scale=0.5, size=2)
        sol = solve_tracking(m, x0, xr, ur, [big] * (N + 1), consts)
        val, _ = tracking_qp_oracle(x0, xr, ur, consts.Q, consts.R, m.dt, N)
        worst = max(worst, abs(sol.value - val))
        if case % 10 == 0:
            guess = np.concatenate([x0, rng.normal(scale=0.3, size=2 * N)])
            prob, _ = _problem(m, x0, xr, ur, [big] * (N + 1), consts, guess)
            grads_ok &= check_gradients(prob, rtol=1e-5).passed
    verdict("C12 solver soundness", worst <= 1e-6 and grads_ok, f"max value gap {worst:.2e} on 100 cases, gradient checks pass: {grads_ok}")
