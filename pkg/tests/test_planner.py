import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from covmpc.density import CustomDensity, GaussianCircular, GaussianWaypointPath, Uniform, cell_moments, gaussian_static
from covmpc.dynamics import SingleIntegrator2D, Tag
from covmpc.errors import BadShift, BudgetDomain, PlannerInfeasible
from covmpc.geometry import ConvexPolygon, partition_sequence
from covmpc.planner import (
    PlannerSettings,
    ReferencePlan,
    ShiftMode,
    coupling_budget,
    is_reachable,
    plan_nonperiodic,
    plan_periodic,
    plan_periodic_coupled,
    shift,
    stacked_distance,
    steady_plan,
)

ARENA = ConvexPolygon.box(-2, 2, -2, 2)
SET = PlannerSettings()


def single_agent_cells(T, where=(0.3, 0.2)):
    return partition_sequence(np.tile(np.array(where, float), (T, 1, 1)), ARENA, 0.055, 0.005).for_agent(0)


def fleet_cells(positions, T):
    return partition_sequence(np.tile(np.asarray(positions, float), (T, 1, 1)), ARENA, 0.055, 0.005)


# -- coupling budget -------------------------------------------------------------------


def test_budget_examples():
    assert coupling_budget(0.0, 70, 180, 0.95, 30).value == pytest.approx(70 / 180)
    assert coupling_budget(70.0, 70, 180, 0.95, 0).value == 0.0
    assert coupling_budget(70.0, 70, 180, 0.95, 30).value == pytest.approx(70 * (1 - 0.95**30) / 180, rel=1e-12)
    assert coupling_budget(70.0, 70, 180, 0.95, 30).value == pytest.approx(0.30542, abs=5e-6)


def test_budget_domain_errors():
    with pytest.raises(BudgetDomain):
        coupling_budget(71.0, 70, 180, 0.95, 30)
    with pytest.raises(BudgetDomain):
        coupling_budget(1.0, 70, 180, 1.0, 30)
    with pytest.raises(BudgetDomain):
        coupling_budget(1.0, 70, 0.0, 0.9, 30)


@given(st.floats(0, 1), st.floats(0.01, 0.99), st.integers(0, 300))
def test_budget_nonnegative(frac, lam, K):
    assert coupling_budget(frac * 5.0, 5.0, 2.0, lam, K).value >= 0


# -- shift -------------------------------------------------------------------------------


def test_shift_examples():
    assert shift(["a", "b", "c"], 1, ShiftMode.PERIODIC) == ["b", "c", "a"]
    assert shift(["a", "b", "c"], 3, ShiftMode.PERIODIC) == ["a", "b", "c"]
    assert shift(["a", "b", "s"], 2, ShiftMode.NONPERIODIC) == ["s", "s", "s"]
    with pytest.raises(BadShift):
        shift([1, 2, 3], 4)
    with pytest.raises(BadShift):
        shift([1, 2, 3], -1)


@given(st.lists(st.integers(), min_size=1, max_size=12), st.data())
def test_periodic_shift_composes(seq, data):
    T = len(seq)
    a = data.draw(st.integers(0, T))
    b = data.draw(st.integers(0, T))
    once = shift(shift(seq, a), b)
    assert once == shift(seq, (a + b) % T)


def test_shifted_plan_keeps_closure():
    m = SingleIntegrator2D()
    us = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]])
    xs = m.rollout([0, 0], us)
    plan = ReferencePlan(__import__("covmpc.dynamics", fromlist=["Trajectory"]).Trajectory(xs, us, Tag.PERIODIC), xs[:4], 0.0)
    s = shift(plan, 1)
    assert s.trajectory.check(m)
    assert np.allclose(s.positions[0], xs[1]) and s.t0 == 1


def test_plan_json_round_trip():
    m = SingleIntegrator2D()
    plan = steady_plan(m, [0.2, 0.1], 5, cost=1.5)
    back = ReferencePlan.from_json(plan.to_json())
    assert np.allclose(back.trajectory.states, plan.trajectory.states)
    assert back.coverage_value == 1.5 and json.loads(plan.to_json())["tag"] == "PERIODIC"


# -- plan_periodic ---------------------------------------------------------------------


def test_single_step_plan_rests_at_centroid():
    m = SingleIntegrator2D()
    cells = partition_sequence(np.array([[[0.5, 0.5], [-0.5, -0.5]]]), ARENA, 0.055, 0.005).for_agent(0)
    plan = plan_periodic(m, cells, Uniform(), 0, settings=SET)
    assert np.allclose(plan.positions[0], cells.cells[0].centroid, atol=1e-5)
    assert is_reachable(plan, m, cells, SET.eps)


def test_two_step_alternating_peaks_against_grid_search():
    peaks = np.array([[-1.0, 0.0], [1.0, 0.0]])
    sigma = 0.4

    def phi(q, t):
        d = q - peaks[int(t) % 2]
        return np.exp(-(d[..., 0] ** 2 + d[..., 1] ** 2) / (2 * sigma**2))

    field_ = CustomDensity(func=phi, period=2, scale=sigma)
    m = SingleIntegrator2D(u_max=50.0)
    cells = single_agent_cells(2)
    plan = plan_periodic(m, cells, field_, 0, settings=SET)

    # brute force: per-step grid search of the integral cost on a fine midpoint grid
    g = np.linspace(-2, 2, 401)[:-1] + 0.005
    q = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    for k in range(2):
        w = phi(q, k) * 0.01**2
        c0 = peaks[k]
        cand = c0 + np.stack(np.meshgrid(np.linspace(-0.1, 0.1, 21), np.linspace(-0.1, 0.1, 21), indexing="ij"), -1).reshape(-1, 2)
        cost = np.array([w @ ((q - p) ** 2).sum(1) for p in cand])
        best = cand[cost.argmin()]
        assert np.linalg.norm(plan.positions[k] - best) <= 0.01 + 1e-9


def test_shifted_optimum_is_not_worse():
    m = SingleIntegrator2D()
    field_ = GaussianCircular(sigma=0.5, radius=0.9, period=8)
    cells = single_agent_cells(8)
    first = plan_periodic(m, cells, field_, 0, settings=SET)
    again = plan_periodic(m, shift(cells, 1), field_, 1, candidate=shift(first, 1), settings=SET)
    assert again.coverage_value <= first.coverage_value + 1e-8


def test_plan_is_reachable_and_periodic():
    m = SingleIntegrator2D()
    field_ = GaussianCircular(sigma=0.5, radius=0.9, period=10)
    seq = fleet_cells([[0.8, 0.3], [-0.6, 0.4], [0.0, -0.9]], 10)
    for i in range(3):
        plan = plan_periodic(m, seq.for_agent(i), field_, 0, settings=SET)
        assert is_reachable(plan, m, seq.for_agent(i), SET.eps)
        assert plan.trajectory.tag == Tag.PERIODIC and plan.trajectory.check(m)


def test_lemma_one_closure_after_repartition():
    m = SingleIntegrator2D()
    field_ = GaussianCircular(sigma=0.5, radius=0.9, period=10)
    seq = fleet_cells([[0.8, 0.3], [-0.6, 0.4], [0.0, -0.9]], 10)
    plans = [plan_periodic(m, seq.for_agent(i), field_, 0, settings=SET) for i in range(3)]
    new = partition_sequence(np.stack([p.positions for p in plans], axis=1), ARENA, 0.055, 0.005)
    for i, p in enumerate(plans):
        assert is_reachable(p, m, new.for_agent(i), SET.eps)


def test_empty_interior_cell_is_infeasible():
    m = SingleIntegrator2D()
    tiny = partition_sequence(np.array([[[-0.03, 0.0], [0.0, 0.0]]]), ConvexPolygon.box(-0.1, 0.1, -0.1, 0.1), 0.055, 0.005)
    with pytest.raises(PlannerInfeasible):
        plan_periodic(m, tiny.for_agent(0), Uniform(), 0, settings=SET)


# -- coupled planner ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def coupled_setup():
    m = SingleIntegrator2D()
    field_ = GaussianCircular(sigma=0.5, radius=0.9, period=12)
    cells = single_agent_cells(12, (0.4, -0.3))
    prev = steady_plan(m, [0.4, -0.3], 12)
    free = plan_periodic(m, cells, field_, 5, candidate=shift(prev, 5), settings=SET)
    return m, field_, cells, prev, free


def test_zero_budget_returns_shifted_plan(coupled_setup):
    m, field_, cells, prev, _ = coupled_setup
    plan = plan_periodic_coupled(m, cells, field_, 5, prev, 0.0, 5, 4, SET)
    ref = shift(prev, 5)
    assert np.array_equal(plan.trajectory.states, ref.trajectory.states)
    assert np.array_equal(plan.trajectory.inputs, ref.trajectory.inputs)


def test_large_budget_matches_free_planner(coupled_setup):
    m, field_, cells, prev, free = coupled_setup
    plan = plan_periodic_coupled(m, cells, field_, 5, prev, 1e3, 5, 4, SET)
    assert plan.coverage_value == pytest.approx(free.coverage_value, rel=1e-5)


def test_binding_budget_is_active(coupled_setup):
    m, field_, cells, prev, free = coupled_setup
    unconstrained = stacked_distance(free, 0, prev, 5, 5)
    budget = 0.3 * unconstrained
    plan = plan_periodic_coupled(m, cells, field_, 5, prev, budget, 5, 4, SET)
    d = stacked_distance(plan, 0, prev, 5, 5)
    assert d == pytest.approx(budget, abs=1e-6)
    # the constraint is binding: a looser budget buys a strictly lower cost
    looser = plan_periodic_coupled(m, cells, field_, 5, prev, 1.2 * budget, 5, 4, SET)
    assert looser.coverage_value < plan.coverage_value
    assert is_reachable(plan, m, cells, SET.eps)


# -- nonperiodic planner ---------------------------------------------------------------------


def test_static_centroid_fixed_point():
    m = SingleIntegrator2D()
    field_ = gaussian_static(0.5, (0.3, -0.2))
    cells = single_agent_cells(10, (0.3, -0.2))
    _, cents, _ = cell_moments(field_, cells.cells[:1], 0)
    prev = steady_plan(m, cents[0], 10, Tag.TERMINAL_STEADY_STATE)
    plan = plan_nonperiodic(m, cells, field_, 5, prev, 5, 4, SET)
    assert np.allclose(plan.trajectory.states, prev.trajectory.states, atol=1e-6)


def test_pinned_prefix_and_terminal_steady_state():
    m = SingleIntegrator2D()
    field_ = GaussianWaypointPath(sigma=0.5, waypoints=((0, -1.0, -1.0), (40, 1.0, 1.0)))
    cells = single_agent_cells(20, (-0.5, -0.5))
    prev = steady_plan(m, [-0.5, -0.5], 20, Tag.TERMINAL_STEADY_STATE)
    first = plan_nonperiodic(m, cells, field_, 0, prev, 0, 5, SET)
    plan = plan_nonperiodic(m, cells, field_, 5, first, 5, 5, SET)
    xs, us = plan.segment(0, 6)
    px, pu = first.segment(5, 6)
    assert np.abs(xs - px).max() <= 1e-9 and np.abs(us - pu).max() <= 1e-9
    assert plan.trajectory.tag == Tag.TERMINAL_STEADY_STATE and plan.trajectory.check(m, 1e-8)
    _, cents, _ = cell_moments(field_, cells.cells, 5)
    start_gap = np.linalg.norm(np.array([-0.5, -0.5]) - cents[-1])
    end_gap = np.linalg.norm(plan.positions[-1] - cents[-1])
    assert end_gap < 0.2 * start_gap
    assert is_reachable(plan, m, cells, SET.eps)


def test_nonperiodic_needs_long_horizon():
    m = SingleIntegrator2D()
    cells = single_agent_cells(4)
    prev = steady_plan(m, [0.3, 0.2], 4, Tag.TERMINAL_STEADY_STATE)
    with pytest.raises(PlannerInfeasible):
        plan_nonperiodic(m, cells, Uniform(), 0, prev, 1, 4, SET)
