"""Tracking MPC without terminal ingredients and its bound calculators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import AgentModel, Tag, Trajectory
from .errors import CertificationFailed, DomainError, TrackerInfeasible
from .geometry import ConvexPolygon, contains
from .nlp import NlpProblem, Shooting, SolverOptions, solve

# eroded cells are tightened internally by this much so solver round-off
# cannot push a closed-loop position across a cell boundary
CELL_BACKOFF = 1e-7


@dataclass
class TrackerConstants:
    """Weights and certified constants of one agent's tracking MPC.

    ``decay`` is ``1 - alpha_N / gamma_bar``.  ``lipschitz_f`` of ``None``
    falls back to the model's value.
    """

    Q: np.ndarray
    R: np.ndarray
    gamma_bar: float
    alpha_N: float
    V_max: float
    L_V: float
    N: int
    K: int
    lipschitz_f: float = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if min(np.linalg.eigvalsh(self.Q)) <= 0 or min(np.linalg.eigvalsh(self.R)) <= 0:
            raise DomainError("Q and R must be positive definite")
        if not 0 < self.alpha_N < self.gamma_bar:
            raise DomainError("need 0 < alpha_N < gamma_bar")

    @property
    def alpha1(self) -> float:
        return float(np.linalg.eigvalsh(self.Q).min())

    @property
    def alpha2(self) -> float:
        return float(np.linalg.eigvalsh(self.Q).max())

    @property
    def decay(self) -> float:
        return 1.0 - self.alpha_N / self.gamma_bar

    def with_lipschitz(self, model: AgentModel) -> "TrackerConstants":
        if self.lipschitz_f is not None:
            return self
        return replace(self, lipschitz_f=model.lipschitz_f)


@dataclass
class TrackerSolution:
    states: np.ndarray  # (N+1, n)
    inputs: np.ndarray  # (N, m)
    value: float
    used_candidate: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]


def stage_cost(x, u, xr, ur, Q, R):
    """Quadratic tracking stage cost, vectorised over leading axes."""
    dx = np.asarray(x) - xr
    du = np.asarray(u) - ur
    return np.einsum("...i,ij,...j->...", dx, Q, dx) + np.einsum("...i,ij,...j->...", du, R, du)


def horizon_cost(states, inputs, ref_states, ref_inputs, Q, R) -> float:
    """Tracking cost summed over the inputs' horizon."""
    n_in = len(inputs)
    return float(stage_cost(states[:n_in], inputs, ref_states[:n_in], ref_inputs[:n_in], Q, R).sum())


def _problem(model, x_now, ref_states, ref_inputs, eroded_cells, consts, guess):
    N = consts.N
    # single shooting over u_0..u_{N-1}; x_0 is pinned by its bounds
    sh = Shooting(model, N)
    lay = sh.lay
    Q, R = consts.Q, consts.R
    xr = np.asarray(ref_states[:N], dtype=float)
    ur = np.asarray(ref_inputs[:N], dtype=float)

    def objective(z):
        xs, us, S = sh(z)
        dx, du = xs[:N] - xr, us - ur
        f = np.einsum("ki,ij,kj->", dx, Q, dx) + np.einsum("ki,ij,kj->", du, R, du)
        g = np.einsum("ki,kis->s", 2 * dx @ Q, S[:N])
        g[lay.n:] += (2 * du @ R).ravel()
        return f, g

    lb = lay.join(x_now, np.tile(model.u_lb, (N, 1)))
    ub = lay.join(x_now, np.tile(model.u_ub, (N, 1)))

    blocks = []
    eye = np.eye(model.n)
    for k in range(1, N):
        cell = eroded_cells[k]
        G = np.vstack([cell.normals @ model.C, eye, -eye])
        r = np.concatenate([cell.offsets - CELL_BACKOFF, model.x_ub, -model.x_lb])
        blocks.append((k, G, r))
    if not blocks:
        return NlpProblem(objective, guess, lb, ub, layout=lay), sh
    if sh.linear:
        A_in = np.vstack([G @ sh._S[k] for k, G, _ in blocks])
        b_in = np.concatenate([r for _, _, r in blocks])
        return NlpProblem(objective, guess, lb, ub, A_ineq=A_in, b_ineq=b_in, layout=lay), sh

    def ineq(z):
        xs, _, S = sh(z)
        return np.concatenate([G @ xs[k] - r for k, G, r in blocks]), np.vstack([G @ S[k] for k, G, _ in blocks])

    return NlpProblem(objective, guess, lb, ub, ineq=ineq, layout=lay), sh


def _feasible(model, states, inputs, eroded_cells, N, tol):
    if not np.all(model.in_state_box(states[:N], tol)) or not np.all(model.in_input_box(inputs[:N], tol)):
        return False
    pos = model.output(states[:N])
    return all(bool(contains(eroded_cells[k], pos[k], tol)) for k in range(1, N))


def solve_tracking(
    model: AgentModel,
    x_now,
    ref_states,
    ref_inputs,
    eroded_cells,
    consts: TrackerConstants,
    warm: Trajectory = None,
    opts: SolverOptions = None,
) -> TrackerSolution:
    """Solve the tracking MPC from ``x_now`` along a reference segment.

    ``ref_states``/``ref_inputs`` hold at least ``N`` reference pairs aligned
    with the horizon; ``eroded_cells[k]`` is the tightened cell for step
    ``k``.  ``warm`` is an optional candidate trajectory (``N + 1`` states)
    that seeds the solver and is returned if the solver cannot beat it.
    """
    N = consts.N
    x_now = np.asarray(x_now, dtype=float)
    ref_states = np.asarray(ref_states, dtype=float)
    ref_inputs = np.asarray(ref_inputs, dtype=float)
    opts = opts or SolverOptions(feas_tol=1e-9, opt_tol=1e-9)
    if eroded_cells[0].is_empty or not contains(eroded_cells[0], model.output(x_now), 1e-9):
        raise TrackerInfeasible("current position outside its eroded cell")
    if any(c.is_empty for c in eroded_cells[:N]):
        raise TrackerInfeasible("empty eroded cell in the horizon")
    if not model.in_state_box(x_now, 1e-9):
        raise TrackerInfeasible("current state outside the state box")

    if warm is None:
        guess = np.concatenate([x_now, np.asarray(ref_inputs[:N], dtype=float).ravel()])
        cand = None
    else:
        w_states = model.rollout(x_now, warm.inputs[:N])
        guess = np.concatenate([x_now, warm.inputs[:N].ravel()])
        cand = guess if _feasible(model, w_states, warm.inputs, eroded_cells, N, 0.0) else None
    problem, sh = _problem(model, x_now, ref_states, ref_inputs, eroded_cells, consts, guess)
    sol = solve(problem, opts, candidate=cand)
    # a feasible iterate is accepted even when stationarity was not certified
    if sol.violation > opts.feas_tol:
        raise TrackerInfeasible(f"tracking MPC failed: {sol.status.value}, violation {sol.violation:.2e}")
    states, us, _ = sh(sol.z)
    states, us = states.copy(), us.copy()
    value = horizon_cost(states, us, ref_states, ref_inputs, consts.Q, consts.R)
    return TrackerSolution(states, us, value, sol.used_candidate, {"status": sol.status.value})


def closed_loop_step(model: AgentModel, x_now, solution: TrackerSolution) -> np.ndarray:
    return model.step(np.asarray(x_now, dtype=float), solution.first_input)


def candidate_trajectory(prev: TrackerSolution, ref_inputs, model: AgentModel) -> Trajectory:
    """Shifted candidate built from the previous tracker solution.

    ``ref_inputs`` is aligned with ``prev`` (index ``k`` is the reference
    input at the time of ``prev.states[k]``) and must reach index ``N``.
    Inputs are ``[u*_1..u*_{N-2}, ur_{N-1}, ur_N]``; states continue the
    previous prediction and roll the last two steps out with those inputs.
    """
    N = len(prev.inputs)
    ref_inputs = np.asarray(ref_inputs, dtype=float)
    inputs = np.vstack([prev.inputs[1 : N - 1], ref_inputs[N - 1][None], ref_inputs[N][None]])
    x_a = model.step(prev.states[N - 1], ref_inputs[N - 1])
    x_b = model.step(x_a, ref_inputs[N])
    states = np.vstack([prev.states[1:N], x_a[None], x_b[None]])
    return Trajectory(states, inputs, Tag.PLAIN)


def check_update_condition(candidate: Trajectory, eroded_cells, model: AgentModel, tol: float = 1e-9) -> bool:
    """Candidate states in the state box and positions in the candidate eroded cells."""
    states = candidate.states
    if not np.all(model.in_state_box(states, tol)):
        return False
    pos = model.output(states)
    for k, p in enumerate(pos):
        cell = eroded_cells[k]
        if cell.is_empty or not contains(cell, p, tol):
            return False
    return True


# -- bound calculators ---------------------------------------------------------


def n_star_raw(alpha_ratio: float, lipschitz_f: float, gamma_bar: float, alpha_N: float) -> float:
    if gamma_bar <= 1 or gamma_bar <= alpha_N or alpha_N <= 0:
        raise DomainError("need gamma_bar > 1 and gamma_bar > alpha_N > 0")
    num = math.log(alpha_ratio * lipschitz_f**2 * gamma_bar**2) - math.log(gamma_bar - alpha_N)
    return num / (math.log(gamma_bar) - math.log(gamma_bar - 1))


def n_star(consts: TrackerConstants, lipschitz_f: float = None) -> int:
    """Smallest horizon for which a partition update keeps the value decaying."""
    lf = lipschitz_f if lipschitz_f is not None else consts.lipschitz_f
    if lf is None:
        raise DomainError("Lipschitz constant of the dynamics is required")
    raw = n_star_raw(consts.alpha2 / consts.alpha1, lf, consts.gamma_bar, consts.alpha_N)
    return max(1, math.ceil(raw))


def candidate_beta(consts: TrackerConstants, lipschitz_f: float = None) -> float:
    lf = lipschitz_f if lipschitz_f is not None else consts.lipschitz_f
    return consts.alpha2 / consts.alpha1 * (lf**2 + lf**4)


def v_epsilon(alpha1, alpha2, lipschitz_f, eps, C_norm) -> float:
    beta = alpha2 / alpha1 * (lipschitz_f**2 + lipschitz_f**4)
    return alpha1 * eps**2 / ((1.0 + beta) * C_norm**2)


def tau_steps(V_eps: float, V_max: float, decay: float) -> int:
    if not (V_eps > 0 and V_max > 0 and 0 < decay < 1):
        raise DomainError("need V_eps, V_max > 0 and decay in (0, 1)")
    if V_eps >= V_max:
        return 0
    return math.ceil((math.log(V_eps) - math.log(V_max)) / math.log(decay))


def finite_update_bounds(consts, eps: float, C_norm: float = 1.0):
    """``(V_eps, tau)`` for one agent or a fleet (list of constants).

    For a fleet, ``V_eps`` is the smallest agent value and ``tau`` uses the
    largest ``V_max`` and slowest decay.
    """
    fleet = consts if isinstance(consts, (list, tuple)) else [consts]
    norms = C_norm if isinstance(C_norm, (list, tuple)) else [C_norm] * len(fleet)
    if eps <= 0 or any(c <= 0 for c in norms):
        raise DomainError("eps and ||C|| must be positive")
    ve = []
    for c, cn in zip(fleet, norms):
        if c.lipschitz_f is None:
            raise DomainError("Lipschitz constant of the dynamics is required")
        ve.append(v_epsilon(c.alpha1, c.alpha2, c.lipschitz_f, eps, cn))
    V_eps = min(ve)
    tau = tau_steps(V_eps, max(c.V_max for c in fleet), max(c.decay for c in fleet))
    return V_eps, tau


def value_lipschitz_bound(Q, R, V_max: float) -> float:
    """A valid reference-Lipschitz constant of the value on ``{V <= V_max}``.

    For a quadratic cost, ``J(r') - J(r) <= 2 sqrt(w V) d + w d^2`` with
    ``w`` the largest weight eigenvalue and ``d`` the stacked reference
    change.  Requiring this below ``L d`` for every ``d <= V_max / L``
    gives ``L = (1 + sqrt 2) sqrt(w V_max)``.
    """
    w = max(np.linalg.eigvalsh(np.atleast_2d(Q)).max(), np.linalg.eigvalsh(np.atleast_2d(R)).max())
    return (1.0 + math.sqrt(2.0)) * math.sqrt(w * V_max)


# -- empirical certification -----------------------------------------------------


@dataclass
class CertificationReport:
    worst_gamma: float
    worst_decay: float
    worst_decrease_slack: float
    trials: int


def _random_reference(model, rng, length, margin):
    """Reachable reference of ``length + 1`` states rolled out from a random steady state."""
    lb, ub = model.state_box(margin)
    ulb, uub = model.input_box(margin)
    for _ in range(200):
        x0 = rng.uniform(lb, ub)
        us = model.steady_input(x0)
        if us is None:
            continue
        amp = 0.3 * rng.uniform() * (uub - ulb) / 2
        freq = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0, 2 * np.pi, size=model.m)
        inputs = np.clip(us + amp * np.sin(freq * np.arange(length)[:, None] + phase), ulb, uub)
        states = model.rollout(x0, inputs)
        if np.all(model.in_state_box(states, 0.0, margin)):
            return states, inputs
    raise DomainError("could not sample a reachable reference for this model")


def estimate_tracking_constants(
    model: AgentModel,
    consts: TrackerConstants,
    arena: ConvexPolygon,
    trials: int = 10,
    steps: int = 30,
    seed=0,
    margin: float = 0.005,
    raise_on_failure: bool = True,
) -> CertificationReport:
    """Empirically certify ``gamma_bar`` and the decay of ``consts``.

    Runs closed-loop tracking from random states (value at most ``V_max``)
    towards random reachable references inside ``arena`` and records the
    worst ratios ``V_0 / ||x_0 - xr_0||_Q^2`` and ``V_{t+1} / V_t``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    N = consts.N
    cells = [arena] * (N + 1)
    worst_gamma = worst_decay = 0.0
    worst_slack = -np.inf
    for trial in range(trials):
        ref_x, ref_u = _random_reference(model, rng, steps + N + 1, margin)
        # perturb the start until the value lies below V_max
        scale = 0.5
        for _ in range(30):
            x0 = np.clip(ref_x[0] + scale * rng.normal(size=model.n) * (model.x_ub - model.x_lb) / 8, model.x_lb, model.x_ub)
            if not contains(arena, model.output(x0), 0.0):
                scale *= 0.5
                continue
            sol = solve_tracking(model, x0, ref_x[:N + 1], ref_u[:N + 1], cells, consts)
            if sol.value <= consts.V_max:
                break
            scale *= 0.5
        else:
            continue
        x = x0
        prev = None
        for t in range(steps):
            sol = solve_tracking(model, x, ref_x[t : t + N + 1], ref_u[t : t + N + 1], cells, consts, warm=prev)
            dx = x - ref_x[t]
            err_q = float(dx @ consts.Q @ dx)
            if t == 0 and sol.value > 0:
                ratio = sol.value / err_q if err_q > 0 else np.inf
                worst_gamma = max(worst_gamma, ratio)
                if ratio > consts.gamma_bar:
                    if raise_on_failure:
                        raise CertificationFailed(f"V_0 / ||x - xr||_Q^2 = {ratio:.4g} exceeds gamma_bar", witness=(x.copy(), t, trial))
            x_next = closed_loop_step(model, x, sol)
            nxt = solve_tracking(
                model, x_next, ref_x[t + 1 : t + N + 2], ref_u[t + 1 : t + N + 2], cells, consts,
                warm=candidate_trajectory(sol, ref_u[t : t + N + 1], model),
            )
            ell = float(stage_cost(x, sol.first_input, ref_x[t], ref_u[t], consts.Q, consts.R))
            worst_slack = max(worst_slack, nxt.value - sol.value + consts.alpha_N * ell)
            if sol.value > 1e-12:
                d = nxt.value / sol.value
                worst_decay = max(worst_decay, d)
                if d > consts.decay + 1e-9 and raise_on_failure:
                    raise CertificationFailed(f"decay {d:.4g} exceeds {consts.decay:.4g}", witness=(x.copy(), t, trial))
            x, prev = x_next, candidate_trajectory(sol, ref_u[t : t + N + 1], model)
    return CertificationReport(worst_gamma, worst_decay, worst_slack, trials)


def certify_value_lipschitz(
    model: AgentModel, consts: TrackerConstants, arena: ConvexPolygon, samples: int = 20, seed=0, margin: float = 0.005
) -> float:
    """Largest sampled ratio ``(V(x, r') - V(x, r)) / ||r' - r||`` with ``V(x, r) <= V_max``."""
    rng = np.random.default_rng(seed)
    N = consts.N
    cells = [arena] * (N + 1)
    worst = 0.0
    for _ in range(samples):
        ref_x, ref_u = _random_reference(model, rng, N + 1, margin)
        x0 = ref_x[0] + 0.05 * rng.normal(size=model.n)
        x0 = np.clip(x0, model.x_lb, model.x_ub)
        try:
            base = solve_tracking(model, x0, ref_x, ref_u, cells, consts)
        except TrackerInfeasible:
            continue
        if base.value > consts.V_max:
            continue
        alt_x, alt_u = _random_reference(model, rng, N + 1, margin)
        w = rng.uniform(0.0, 0.2)
        rx = (1 - w) * ref_x + w * alt_x
        ru = (1 - w) * ref_u + w * alt_u
        d = math.sqrt(float(((rx - ref_x) ** 2).sum() + ((ru[:N + 1] - ref_u[:N + 1]) ** 2).sum()))
        if d < 1e-12:
            continue
        other = solve_tracking(model, x0, rx, ru, cells, consts)
        worst = max(worst, (other.value - base.value) / d)
    return worst
