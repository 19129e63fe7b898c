import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from covmpc.dynamics import KinematicBicycle, LinearSystem, SingleIntegrator2D, Tag, Trajectory, estimate_lipschitz, output
from covmpc.errors import DimensionMismatch


@pytest.fixture(scope="module")
def bike():
    return KinematicBicycle()


def test_single_integrator_step():
    m = SingleIntegrator2D(dt=0.1)
    assert np.allclose(m.step([0, 0], [1, 0]), [0.1, 0])


def test_bicycle_straight_line(bike):
    assert np.allclose(bike.step([0.2, -0.3, 0.0, 1.0], [0.0, 0.0]), [0.2 + 0.033, -0.3, 0, 1], atol=1e-15)


def test_bicycle_rk4_against_fine_integration(bike):
    x0 = np.array([0.1, -0.2, 0.4, 0.8])
    u = np.array([0.2, 0.5])
    steps = 30
    xs = bike.rollout(x0, np.tile(u, (steps, 1)))
    ref = solve_ivp(lambda t, x: bike.continuous(x, u), (0, steps * bike.dt), x0, method="DOP853", rtol=1e-12, atol=1e-13)
    assert np.abs(xs[-1] - ref.y[:, -1]).max() < 1e-6


def test_rollout_matches_repeated_step(bike):
    rng = np.random.default_rng(1)
    us = rng.uniform(-0.3, 0.3, (12, 2))
    x = np.array([0.0, 0.0, 0.3, 0.5])
    xs = bike.rollout(x, us)
    for k, u in enumerate(us):
        x = bike.step(x, u)
        assert np.allclose(xs[k + 1], x, atol=1e-14)


def test_dimension_mismatch(bike):
    with pytest.raises(DimensionMismatch):
        bike.step([0, 0], [0, 0])
    with pytest.raises(DimensionMismatch):
        output(bike, [1.0, 2.0])


def test_outputs():
    bike = KinematicBicycle()
    assert np.allclose(output(bike, [1, 2, 0.3, 0.9]), [1, 2])
    si = SingleIntegrator2D()
    assert np.allclose(output(si, [0.4, -0.1]), [0.4, -0.1])
    assert np.linalg.norm(bike.C, 2) == pytest.approx(1.0)


@given(st.integers(0, 1000))
def test_bicycle_jacobians_match_finite_differences(seed):
    bike = KinematicBicycle()
    rng = np.random.default_rng(seed)
    x = np.r_[rng.uniform(-1, 1, 2), rng.uniform(-3, 3), rng.uniform(0.1, 2)]
    u = rng.uniform([-0.4, -2], [0.4, 2])
    A, B = bike.jacobians(x, u)
    h = 1e-6
    Af = np.column_stack([(bike.step(x + h * e, u) - bike.step(x - h * e, u)) / (2 * h) for e in np.eye(4)])
    Bf = np.column_stack([(bike.step(x, u + h * e) - bike.step(x, u - h * e)) / (2 * h) for e in np.eye(2)])
    assert np.allclose(A, Af, atol=1e-7) and np.allclose(B, Bf, atol=1e-7)


def test_batched_jacobians_agree(bike):
    rng = np.random.default_rng(2)
    xs = np.c_[rng.uniform(-1, 1, (5, 2)), rng.uniform(-3, 3, 5), rng.uniform(0.1, 2, 5)]
    us = rng.uniform(-0.3, 0.3, (5, 2))
    A, B = bike.jacobians_along(xs, us)
    for k in range(5):
        a, b = bike.jacobians(xs[k], us[k])
        assert np.allclose(A[k], a) and np.allclose(B[k], b)


def test_single_integrator_lipschitz():
    assert estimate_lipschitz(SingleIntegrator2D(), 2000) == pytest.approx(1.1)


def test_linear_lipschitz_is_spectral_norm():
    A = np.array([[1.0, 0.1], [0.0, 0.9]])
    lin = LinearSystem(A, np.eye(2) * 0.1, 0.1, [-1, -1], [1, 1], [-1, -1], [1, 1], np.eye(2))
    est = estimate_lipschitz(lin, 20000, seed=0)
    assert est <= 1.1 * np.linalg.norm(A, 2) + 1e-12
    assert est >= 1.1 * np.linalg.norm(A, 2) * 0.97


def test_bicycle_lipschitz_repeatable():
    a = estimate_lipschitz(KinematicBicycle(), 2000, seed=0)
    b = estimate_lipschitz(KinematicBicycle(), 2000, seed=1)
    assert np.isfinite(a) and abs(a - b) <= 0.05 * a


@given(st.integers(0, 1000))
def test_lipschitz_inequality_holds_on_samples(seed):
    bike = KinematicBicycle()
    L = bike.lipschitz_f
    rng = np.random.default_rng(seed)
    lo, hi = bike.state_box()
    x, y = rng.uniform(lo, hi, (2, 4))
    u = rng.uniform(*bike.input_box())
    assert np.linalg.norm(bike.step(x, u) - bike.step(y, u)) <= L * np.linalg.norm(x - y) + 1e-12


def test_box_membership_inclusive():
    si = SingleIntegrator2D(pos_bound=2.0)
    assert si.in_state_box([2.0, -2.0], tol=0.0)
    assert not si.in_state_box([2.0 + 1e-6, 0.0], tol=1e-9)
    assert si.in_state_box([2.0 + 1e-10, 0.0], tol=1e-9)


def test_steady_inputs():
    assert np.allclose(SingleIntegrator2D().steady_input([0.3, 0.1]), 0)
    bike = KinematicBicycle(v_min=-0.5)
    assert np.allclose(bike.steady_input([0, 0, 0.2, 0.0]), 0)
    assert bike.steady_input([0, 0, 0.2, 0.5]) is None


def test_trajectory_tags_checked():
    si = SingleIntegrator2D()
    loop = Trajectory([[0, 0], [0.1, 0], [0, 0]], [[1, 0], [-1, 0]], Tag.PERIODIC)
    assert loop.check(si)
    broken = Trajectory([[0, 0], [0.1, 0], [0.05, 0]], [[1, 0], [-0.5, 0]], Tag.PERIODIC)
    assert not broken.check(si)
    steady = Trajectory([[0, 0], [0.1, 0], [0.1, 0]], [[1, 0], [0, 0]], Tag.TERMINAL_STEADY_STATE)
    assert steady.check(si)
    back = Trajectory.from_dict(steady.to_dict(si))
    assert np.allclose(back.states, steady.states) and back.tag == steady.tag
    with pytest.raises(DimensionMismatch):
        Trajectory([[0, 0]], [[1, 0]])
