"""Reference planners, shifting and the coupling budget.

A plan of horizon ``T`` is a state sequence ``x_0..x_T`` with inputs
``u_0..u_{T-1}``.  Periodic plans close the loop (``x_T = x_0``); plans
with a terminal steady state have ``x_T = x_{T-1}``.  Reference indexing
beyond the horizon wraps around for periodic plans and is clamped to the
steady state otherwise.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .density import DensityField, cell_moments
from .dynamics import AgentModel, Tag, Trajectory
from .errors import BadShift, BudgetDomain, PlannerInfeasible
from .geometry import AgentCells, PartitionSequence, contains
from .nlp import NlpProblem, Shooting, SolverOptions, solve

REACH_TOL = 1e-7
# the solver result must beat the candidate by more than this to replace it
TIE_TOL = 1e-10


class ShiftMode(str, enum.Enum):
    PERIODIC = "periodic"
    NONPERIODIC = "nonperiodic"


@dataclass
class CouplingBudget:
    value: float
    V_max: float
    L_V: float
    decay: float
    K: int
    V: float


def coupling_budget(V: float, V_max: float, L_V: float, decay: float, K: int) -> CouplingBudget:
    """Reference change allowed so the tracker value is back below ``V_max`` after ``K`` steps."""
    if not 0 < decay < 1:
        raise BudgetDomain("decay must lie in (0, 1)")
    if L_V <= 0:
        raise BudgetDomain("L_V must be positive")
    if V < 0 or V > V_max:
        raise BudgetDomain(f"value {V:.6g} outside [0, V_max={V_max:.6g}]")
    return CouplingBudget((V_max - decay**K * V) / L_V, V_max, L_V, decay, K, V)


@dataclass
class ReferencePlan:
    """Planned reference of one agent and the coverage cost it achieves."""

    trajectory: Trajectory
    positions: np.ndarray
    coverage_value: float
    partition_used: AgentCells = None
    t0: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.trajectory.length

    @property
    def mode(self) -> ShiftMode:
        return ShiftMode.PERIODIC if self.trajectory.tag == Tag.PERIODIC else ShiftMode.NONPERIODIC

    def index(self, k):
        k = np.asarray(k)
        if self.mode == ShiftMode.PERIODIC:
            return k % self.T
        return np.clip(k, 0, self.T - 1)

    def states_at(self, k) -> np.ndarray:
        return self.trajectory.states[self.index(k)]

    def inputs_at(self, k) -> np.ndarray:
        return self.trajectory.inputs[self.index(k)]

    def segment(self, start: int, count: int):
        """``count`` reference (state, input) pairs from plan index ``start``."""
        k = np.arange(start, start + count)
        return self.states_at(k), self.inputs_at(k)

    def to_dict(self) -> dict:
        return {
            "states": self.trajectory.states.tolist(),
            "inputs": self.trajectory.inputs.tolist(),
            "positions": np.asarray(self.positions).tolist(),
            "cost": float(self.coverage_value),
            "tag": self.trajectory.tag.value,
            "t0": int(self.t0),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "ReferencePlan":
        traj = Trajectory(np.array(d["states"]), np.array(d["inputs"]), Tag(d["tag"]))
        return cls(traj, np.array(d["positions"]), float(d["cost"]), None, int(d.get("t0", 0)))

    @classmethod
    def from_json(cls, text: str) -> "ReferencePlan":
        return cls.from_dict(json.loads(text))


# -- shifting -------------------------------------------------------------------


def _shift_seq(seq, n, mode):
    T = len(seq)
    if not 0 <= n <= T:
        raise BadShift(f"shift {n} outside [0, {T}]")
    if mode == ShiftMode.PERIODIC:
        idx = [(k + n) % T for k in range(T)]
    else:
        idx = [min(k + n, T - 1) for k in range(T)]
    if isinstance(seq, np.ndarray):
        return seq[idx]
    return [seq[k] for k in idx]


def shift(obj, n: int, mode="periodic"):
    """Shift a sequence, trajectory, plan or partition sequence by ``n`` steps.

    Periodic mode rotates cyclically; nonperiodic mode drops the first
    ``n`` entries and repeats the last one.
    """
    mode = ShiftMode(mode)
    if isinstance(obj, ReferencePlan):
        return replace(
            obj,
            trajectory=shift(obj.trajectory, n, mode),
            positions=_shift_seq(np.asarray(obj.positions), n, mode),
            partition_used=None if obj.partition_used is None else shift(obj.partition_used, n, mode),
            t0=obj.t0 + n,
            meta=dict(obj.meta),
        )
    if isinstance(obj, Trajectory):
        T = obj.length
        states = _shift_seq(obj.states[:T], n, mode)
        inputs = _shift_seq(obj.inputs, n, mode)
        last = states[0] if mode == ShiftMode.PERIODIC else states[-1]
        return Trajectory(np.vstack([states, last[None]]), inputs, obj.tag, dict(obj.meta))
    if isinstance(obj, PartitionSequence):
        return PartitionSequence(*(_shift_seq(list(x), n, mode) for x in (obj.cells, obj.eroded, obj.interior)))
    if isinstance(obj, AgentCells):
        return AgentCells(*(_shift_seq(list(x), n, mode) for x in (obj.cells, obj.eroded, obj.interior)))
    if isinstance(obj, (list, tuple, np.ndarray)):
        out = _shift_seq(obj if isinstance(obj, np.ndarray) else list(obj), n, mode)
        return type(obj)(out) if isinstance(obj, tuple) else out
    raise TypeError(f"cannot shift {type(obj).__name__}")


# -- planning problems ------------------------------------------------------------


@dataclass
class PlannerSettings:
    """Tightening margin, quadrature resolution and solver options."""

    eps: float = 0.005
    resolution: float = 1.0
    opts: SolverOptions = field(default_factory=lambda: SolverOptions(feas_tol=1e-9, opt_tol=1e-6))


def steady_plan(model: AgentModel, x, T: int, tag: Tag = Tag.PERIODIC, cost: float = float("nan")) -> ReferencePlan:
    """Constant plan resting at the steady state ``x``."""
    x = np.asarray(x, dtype=float)
    u = model.steady_input(x)
    if u is None:
        raise PlannerInfeasible("state is not a steady state of the model")
    traj = Trajectory(np.tile(x, (T + 1, 1)), np.tile(u, (T, 1)), tag)
    return ReferencePlan(traj, np.tile(model.output(x), (T, 1)), cost)


def _base_problem(model, cells: AgentCells, field_, t0, T, settings, periodic, guess):
    """Coverage objective, closure equality, interior boxes and interior cells."""
    for k in range(T):
        if cells.interior[k].is_empty:
            raise PlannerInfeasible(f"interior cell {k} is empty")
    masses, cents, spreads = cell_moments(field_, cells.cells[:T], t0, settings.resolution)
    sh = Shooting(model, T)
    lay = sh.lay
    C = model.C
    last = 0 if periodic else T - 1

    def objective(z):
        xs, _, S = sh(z)
        e = xs[:T] @ C.T - cents
        f = float(masses @ (e**2).sum(axis=1))
        g = np.einsum("ki,ij,kjs->s", 2.0 * masses[:, None] * e, C, S[:T])
        return f, g

    def eq(z):
        xs, _, S = sh(z)
        return xs[T] - xs[last], S[T] - S[last]

    xlb, xub = model.state_box(settings.eps)
    ulb, uub = model.input_box(settings.eps)
    lb = lay.join(xlb, np.tile(ulb, (T, 1)))
    ub = lay.join(xub, np.tile(uub, (T, 1)))

    # stacked affine-in-state rows: interior boxes for k >= 1 and interior cells
    blocks, rhs = [], []
    eye = np.eye(model.n)
    for k in range(T):
        cell = cells.interior[k]
        rows = [cell.normals @ C]
        rhs_k = [cell.offsets]
        if k >= 1:
            rows += [eye, -eye]
            rhs_k += [xub, -xlb]
        blocks.append((k, np.vstack(rows), np.concatenate(rhs_k)))

    if sh.linear:
        A_in = np.vstack([G @ sh._S[k] for k, G, _ in blocks])
        b_in = np.concatenate([r for _, _, r in blocks])
        problem = NlpProblem(objective, guess, lb, ub, eq=eq, A_ineq=A_in, b_ineq=b_in, layout=lay)
    else:

        def state_ineq(z):
            xs, _, S = sh(z)
            vals = np.concatenate([G @ xs[k] - r for k, G, r in blocks])
            jac = np.vstack([G @ S[k] for k, G, _ in blocks])
            return vals, jac

        problem = NlpProblem(objective, guess, lb, ub, eq=eq, ineq=state_ineq, layout=lay)
    return problem, sh, (masses, cents, spreads)


def _as_plan(model, sh: Shooting, z, tag, moments, cells, t0, meta) -> ReferencePlan:
    xs, us, _ = sh(np.asarray(z, dtype=float))
    traj = Trajectory(xs.copy(), us.copy(), tag)
    pos = model.output(xs[: sh.T])
    masses, cents, spreads = moments
    value = float(masses @ ((pos - cents) ** 2).sum(axis=1) + spreads.sum())
    return ReferencePlan(traj, pos, value, cells, t0, meta)


def _z_of(sh, traj: Trajectory):
    return sh.lay.join(traj.states[0], traj.inputs[: sh.T])


def is_reachable(plan: ReferencePlan, model: AgentModel, cells: AgentCells, eps: float, tol: float = REACH_TOL) -> bool:
    """Dynamics, closure tag, interior boxes and interior-cell membership."""
    traj = plan.trajectory
    if not traj.check(model, tol=min(tol, 1e-8)):
        return False
    T = traj.length
    if not np.all(model.in_state_box(traj.states[:T], tol, eps)) or not np.all(model.in_input_box(traj.inputs, tol, eps)):
        return False
    for k in range(T):
        cell = cells.interior[k]
        if cell.is_empty or not contains(cell, plan.positions[k], tol):
            return False
    return True


def _decide(model, sh, sol, candidate, tag, moments, cells, t0, settings, meta):
    """Candidate-guarantee rule: keep the candidate unless strictly beaten."""
    cand_plan = None
    if candidate is not None:
        cand_traj = candidate.trajectory if isinstance(candidate, ReferencePlan) else candidate
        cand_plan = _as_plan(model, sh, _z_of(sh, cand_traj), tag, moments, cells, t0, dict(meta, used_candidate=True))
        if not is_reachable(cand_plan, model, cells, settings.eps):
            cand_plan = None
    sol_plan = None
    # a feasible iterate is usable even if stationarity was not certified
    if sol is not None and sol.violation <= settings.opts.feas_tol:
        sol_plan = _as_plan(model, sh, sol.z, tag, moments, cells, t0, dict(meta, used_candidate=False, status=sol.status.value))
        if not is_reachable(sol_plan, model, cells, settings.eps):
            sol_plan = None
    if cand_plan is None and sol_plan is None:
        status = "not run" if sol is None else f"{sol.status.value}, violation {sol.violation:.2e}"
        raise PlannerInfeasible(f"no reachable plan ({status})")
    if sol_plan is None:
        return cand_plan
    if cand_plan is None or sol_plan.coverage_value < cand_plan.coverage_value - TIE_TOL:
        return sol_plan
    return cand_plan


def _guess(model, cells, sh, candidate):
    if candidate is not None:
        return _z_of(sh, candidate.trajectory if isinstance(candidate, ReferencePlan) else candidate)
    if any(c.is_empty for c in cells.interior):
        raise PlannerInfeasible("empty interior cell in the planning horizon")
    # rest at the first interior-cell centroid
    x, *_ = np.linalg.lstsq(model.C, cells.interior[0].centroid, rcond=None)
    x = np.clip(x, *model.state_box())
    u = model.steady_input(x)
    if u is None:
        u = (model.u_lb + model.u_ub) / 2
    return sh.lay.join(x, np.tile(u, (sh.T, 1)))


def plan_periodic(
    model: AgentModel,
    cells: AgentCells,
    field_: DensityField,
    t0: int,
    candidate=None,
    settings: PlannerSettings = None,
) -> ReferencePlan:
    """Periodic coverage plan over ``len(cells)`` steps starting at time ``t0``.

    ``candidate`` (plan or trajectory), typically the shifted previous
    plan, seeds the solver and is kept unless the solver finds a strictly
    cheaper reachable plan.
    """
    settings = settings or PlannerSettings()
    T = len(cells)
    sh = Shooting(model, T)
    problem, sh, moments = _base_problem(model, cells, field_, t0, T, settings, True, _guess(model, cells, sh, candidate))
    sol = solve(problem, settings.opts)
    return _decide(model, sh, sol, candidate, Tag.PERIODIC, moments, cells, t0, settings, {})


def stacked_distance(plan_a: ReferencePlan, start_a: int, plan_b: ReferencePlan, start_b: int, count: int) -> float:
    """Euclidean norm of stacked (x, u) deviations over ``count`` reference pairs."""
    xa, ua = plan_a.segment(start_a, count)
    xb, ub = plan_b.segment(start_b, count)
    return float(np.sqrt(((xa - xb) ** 2).sum() + ((ua - ub) ** 2).sum()))


def _with_extra_ineq(problem: NlpProblem, extra):
    base = problem.ineq
    if base is None:
        problem.ineq = extra
        return

    def both(z):
        g1, J1 = base(z)
        g2, J2 = extra(z)
        return np.concatenate([g1, g2]), np.vstack([J1, J2])

    problem.ineq = both


def plan_periodic_coupled(
    model: AgentModel,
    cells: AgentCells,
    field_: DensityField,
    t0: int,
    prev_plan: ReferencePlan,
    budget: float,
    K: int,
    N: int,
    settings: PlannerSettings = None,
) -> ReferencePlan:
    """Periodic plan whose first ``N + 1`` pairs stay within ``budget`` of ``prev_plan[K:K+N]``.

    ``prev_plan`` is indexed from its own start, so its segment ``K..K+N``
    is compared with the new plan's ``0..N`` (both cyclically).
    """
    settings = settings or PlannerSettings()
    budget = float(budget)
    if budget < 0:
        raise BudgetDomain("negative coupling budget")
    T = len(cells)
    candidate = shift(prev_plan, K % prev_plan.T, ShiftMode.PERIODIC)
    sh = Shooting(model, T)
    if budget <= 1e-12:
        # the trust region has collapsed onto the shifted previous plan
        moments = cell_moments(field_, cells.cells[:T], t0, settings.resolution)
        plan = ReferencePlan(candidate.trajectory, candidate.positions, 0.0, cells, t0, {"used_candidate": True, "budget": budget})
        masses, cents, spreads = moments
        plan.coverage_value = float(masses @ ((plan.positions - cents) ** 2).sum(axis=1) + spreads.sum())
        if not is_reachable(plan, model, cells, settings.eps):
            raise PlannerInfeasible("shifted previous plan is not reachable in the new cells")
        plan.meta["distance"] = 0.0
        return plan

    problem, sh, moments = _base_problem(model, cells, field_, t0, T, settings, True, _guess(model, cells, sh, candidate))
    ks = np.arange(N + 1) % T
    old_x, old_u = prev_plan.segment(K, N + 1)
    scale = 1.0 / budget**2
    cap = 1.0 - 1e-8  # a hair of slack so round-off never exceeds the budget

    def ball(z):
        xs, us, S = sh(z)
        dx = xs[ks] - old_x
        du = us[ks] - old_u
        g = scale * float((dx**2).sum() + (du**2).sum()) - cap
        grad = np.einsum("ki,kis->s", 2 * scale * dx, S[ks])
        gu = np.zeros_like(us)
        np.add.at(gu, ks, 2 * scale * du)
        grad[sh.lay.num_states * model.n :] += gu.ravel()
        return np.array([g]), grad[None]

    _with_extra_ineq(problem, ball)
    sol = solve(problem, settings.opts)
    plan = _decide(model, sh, sol, candidate, Tag.PERIODIC, moments, cells, t0, settings, {"budget": budget})
    dist = stacked_distance(plan, 0, prev_plan, K, N + 1)
    if dist > budget * (1 + 1e-7) + 1e-12:
        raise PlannerInfeasible(f"coupled plan moved {dist:.3g} beyond budget {budget:.3g}")
    plan.meta["distance"] = dist
    return plan


def plan_nonperiodic(
    model: AgentModel,
    cells: AgentCells,
    field_: DensityField,
    t0: int,
    prev_plan: ReferencePlan,
    K: int,
    N: int,
    settings: PlannerSettings = None,
) -> ReferencePlan:
    """Plan ending in a steady state whose first ``N + 1`` pairs equal ``prev_plan[K:K+N]``."""
    settings = settings or PlannerSettings()
    T = len(cells)
    if N + 1 > T:
        raise PlannerInfeasible("horizon T must exceed the tracker horizon N")
    if prev_plan.T != T:
        raise PlannerInfeasible("previous plan has a different horizon")
    candidate = shift(prev_plan, min(K, T), ShiftMode.NONPERIODIC)
    sh = Shooting(model, T)
    problem, sh, moments = _base_problem(model, cells, field_, t0, T, settings, False, _guess(model, cells, sh, candidate))
    # pinning x_0 and u_0..u_N pins states 0..N as well
    pin_x, pin_u = prev_plan.segment(K, N + 1)
    lay = sh.lay
    problem.lb[lay.state(0)] = problem.ub[lay.state(0)] = pin_x[0]
    for k in range(N + 1):
        problem.lb[lay.input(k)] = problem.ub[lay.input(k)] = pin_u[k]
    sol = solve(problem, settings.opts)
    plan = _decide(model, sh, sol, candidate, Tag.TERMINAL_STEADY_STATE, moments, cells, t0, settings, {})
    xs, us = plan.segment(0, N + 1)
    plan.meta["pin_error"] = float(max(np.abs(xs - pin_x).max(), np.abs(us - pin_u).max()))
    return plan


def coverage_values(plans) -> float:
    return float(sum(p.coverage_value for p in plans))


def budget_is_active(plan: ReferencePlan, budget: float, tol: float = 1e-6) -> bool:
    d = plan.meta.get("distance", math.nan)
    return abs(d - budget) <= tol
