"""Multi-rate coordination of planners and trackers across a fleet.

Time is counted in tracker steps.  Reference plans and partition sequences
are stored together with the absolute time of their first element; look-ups
wrap around (periodic mode) or clamp to the last element (nonperiodic mode),
which realises the shifting operations without copying.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .density import DensityField, locational_cost
from .dynamics import AgentModel, Tag
from .errors import BudgetDomain, ConfigError, MissingVote, PlannerInfeasible, TrackerInfeasible
from .geometry import AgentCells, ConvexPolygon, PartitionSequence, contains, min_pairwise_distance, partition_sequence
from .planner import (
    PlannerSettings,
    ReferencePlan,
    ShiftMode,
    coupling_budget,
    plan_nonperiodic,
    plan_periodic,
    plan_periodic_coupled,
    shift,
    steady_plan,
)
from .tracker import (
    TrackerConstants,
    TrackerSolution,
    candidate_trajectory,
    check_update_condition,
    closed_loop_step,
    n_star,
    solve_tracking,
    stage_cost,
)


class Mode(str, enum.Enum):
    LLOYD_PERIODIC = "LLOYD_PERIODIC"
    PERIODIC_MPC = "PERIODIC_MPC"
    NONPERIODIC_MPC = "NONPERIODIC_MPC"


@dataclass
class FleetConfig:
    """Everything a run needs.

    ``initial_states`` must be steady states.  ``initial_plans`` replaces
    the default constant steady-state plans; together with
    ``pin_planner`` it freezes the references (every planning round then
    returns the shifted previous plan).
    """

    models: list
    consts: list
    arena: ConvexPolygon
    field: DensityField
    initial_states: np.ndarray
    T: int = 20
    K: int = 5
    N: int = 10
    r_max: float = 0.055
    eps: float = 0.005
    mode: Mode = Mode.PERIODIC_MPC
    seed: int = 0
    max_steps: int = 200
    resolution: float = 1.0
    conv_tol: float = 1e-6
    max_iters: int = 50
    pin_planner: bool = False
    initial_plans: Optional[list] = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.initial_states = np.atleast_2d(np.asarray(self.initial_states, dtype=float))

    @property
    def M(self) -> int:
        return len(self.models)

    @property
    def settings(self) -> PlannerSettings:
        return PlannerSettings(eps=self.eps, resolution=self.resolution)

    @property
    def shift_mode(self) -> ShiftMode:
        return ShiftMode.NONPERIODIC if self.mode == Mode.NONPERIODIC_MPC else ShiftMode.PERIODIC

    def initial_positions(self) -> np.ndarray:
        return np.array([m.output(x) for m, x in zip(self.models, self.initial_states)])

    def validate(self, check_horizon: bool = True):
        """Raise ConfigError unless the fleet satisfies the run preconditions."""
        if self.M < 1 or len(self.consts) != self.M or len(self.initial_states) != self.M:
            raise ConfigError("models, constants and initial states must have one entry per agent")
        if min(self.T, self.K, self.N) < 1:
            raise ConfigError("T, K and N must be positive")
        if self.r_max < 0 or self.eps <= 0:
            raise ConfigError("need r_max >= 0 and eps > 0")
        if self.mode == Mode.NONPERIODIC_MPC and self.N + 1 > self.T:
            raise ConfigError("nonperiodic planning needs T > N")
        for i, (m, x, c) in enumerate(zip(self.models, self.initial_states, self.consts)):
            if c.N != self.N or c.K != self.K:
                raise ConfigError(f"agent {i}: tracker constants disagree with the fleet N/K")
            if check_horizon:
                bound = n_star(c, c.lipschitz_f if c.lipschitz_f is not None else m.lipschitz_f)
                if self.N < bound:
                    raise ConfigError(f"agent {i}: horizon N={self.N} below the required N*={bound}")
            u = m.steady_input(x)
            if u is None:
                raise ConfigError(f"agent {i}: initial state is not a steady state")
            if not m.in_state_box(x, 0.0, self.eps) or not m.in_input_box(u, 0.0, self.eps):
                raise ConfigError(f"agent {i}: initial state/input not in the tightened boxes")
        p = self.initial_positions()
        if self.M > 1 and min_pairwise_distance(p) < 2 * (self.r_max + self.eps):
            raise ConfigError("initial positions closer than 2 (r_max + eps)")
        seq = partition_sequence(p[None], self.arena, self.r_max, self.eps)
        for i in range(self.M):
            cell = seq.interior[0][i]
            if cell.is_empty or not contains(cell, p[i], 1e-12):
                raise ConfigError(f"agent {i}: initial position too close to the arena boundary")
        return self


# -- message passing ---------------------------------------------------------------


@dataclass(frozen=True)
class ReferencePositions:
    positions: np.ndarray


@dataclass(frozen=True)
class UpdateVote:
    ok: bool


@dataclass(frozen=True)
class PlanAck:
    pass


@dataclass(frozen=True)
class RoundMessage:
    sender: int
    round: int
    payload: object


class MessageBus:
    """Synchronous, reliable, in-order bus with an all-gather barrier."""

    def __init__(self, num_agents: int):
        self.num_agents = num_agents
        self._inbox: list[RoundMessage] = []
        self.history: list[RoundMessage] = []

    def post(self, msg: RoundMessage):
        payload = msg.payload
        if isinstance(payload, ReferencePositions):
            payload = ReferencePositions(np.array(payload.positions, dtype=float, copy=True))
        msg = RoundMessage(msg.sender, msg.round, payload)
        self._inbox.append(msg)
        self.history.append(msg)

    def gather(self, round_index: int, kind: type) -> dict:
        """Collect exactly one ``kind`` payload per agent for ``round_index``."""
        got = {}
        keep = []
        for msg in self._inbox:
            if msg.round == round_index and isinstance(msg.payload, kind):
                if msg.sender in got:
                    raise MissingVote(f"agent {msg.sender} sent two {kind.__name__} messages")
                got[msg.sender] = msg.payload
            else:
                keep.append(msg)
        self._inbox = keep
        if sorted(got) != list(range(self.num_agents)):
            missing = sorted(set(range(self.num_agents)) - set(got))
            raise MissingVote(f"round {round_index}: no {kind.__name__} from agents {missing}")
        return got


def consensus_round(votes, num_agents: int = None) -> bool:
    """Logical AND over one vote per agent."""
    votes = list(votes)
    if num_agents is not None and len(votes) != num_agents:
        raise MissingVote(f"expected {num_agents} votes, got {len(votes)}")
    if not votes:
        raise MissingVote("no votes")
    return all(bool(v) for v in votes)


# -- run log -------------------------------------------------------------------------


@dataclass
class StepRecord:
    t: int
    positions: np.ndarray
    values: np.ndarray
    stage_costs: np.ndarray
    coverage_cost: float
    reference_cost: float
    min_distance: float
    swap: bool
    in_own_cell: bool


@dataclass
class RunLog:
    mode: Mode
    steps: list = field(default_factory=list)
    # Lloyd cost per iteration (index 0 is the initial plan)
    cost_trace: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    positions: Optional[np.ndarray] = None
    update_values: list = field(default_factory=list)  # (t, max_i V) right after each reference update
    swap_times: list = field(default_factory=list)
    plan_history: list = field(default_factory=list)
    aborted: Optional[str] = None
    abort_info: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.steps) if self.steps else len(self.cost_trace)

    @property
    def coverage_costs(self) -> np.ndarray:
        return np.array([s.coverage_cost for s in self.steps])

    @property
    def values(self) -> np.ndarray:
        return np.array([s.values for s in self.steps])

    @property
    def trajectory(self) -> np.ndarray:
        """Closed-loop positions ``(steps + 1, M, 2)``."""
        return self.positions

    CSV_HEADER_FIXED = ["t", "coverage_cost", "reference_cost", "min_distance", "swap"]

    def csv_header(self) -> list:
        m = self.steps[0].positions.shape[0] if self.steps else 0
        cols = list(self.CSV_HEADER_FIXED)
        for i in range(m):
            cols += [f"x{i}", f"y{i}", f"V{i}", f"stage{i}"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.steps:
            w.writerow(self.csv_header())
            for s in self.steps:
                row = [s.t, repr(float(s.coverage_cost)), repr(float(s.reference_cost)), repr(float(s.min_distance)), int(s.swap)]
                for p, v, c in zip(s.positions, s.values, s.stage_costs):
                    row += [repr(float(p[0])), repr(float(p[1])), repr(float(v)), repr(float(c))]
                w.writerow(row)
        else:
            w.writerow(["iteration", "coverage_cost"])
            for k, c in enumerate(self.cost_trace):
                w.writerow([k, repr(float(c))])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {
            "mode": self.mode.value,
            "config": self.config_echo,
            "aborted": self.aborted,
            "abort_info": self.abort_info,
        }
        if self.steps:
            costs = self.coverage_costs
            out.update(
                steps=len(self.steps),
                final_coverage_cost=float(costs[-1]),
                mean_coverage_cost=float(costs.mean()),
                swaps=len(self.swap_times),
                swap_times=list(self.swap_times),
                planner_updates=len(self.update_values),
                max_post_update_value=max((v for _, v in self.update_values), default=0.0),
                min_pairwise_distance=float(min(s.min_distance for s in self.steps)),
                own_cell_violations=int(sum(not s.in_own_cell for s in self.steps)),
            )
        else:
            out.update(iterations=len(self.cost_trace) - 1, cost_trace=[float(c) for c in self.cost_trace])
        return out

    def write(self, directory):
        """Write ``log.csv`` and ``summary.json`` into ``directory``."""
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "log.csv").write_text(self.to_csv())
        (d / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return [d / "log.csv", d / "summary.json"]


# -- periodic Lloyd planning ------------------------------------------------------


def run_lloyd_periodic(cfg: FleetConfig) -> RunLog:
    """Alternate Voronoi re-partitioning and periodic re-planning until the cost stalls."""
    cfg.validate(check_horizon=False)
    T, settings = cfg.T, cfg.settings
    log = RunLog(Mode.LLOYD_PERIODIC, config_echo=_echo(cfg))
    p0 = cfg.initial_positions()
    W = partition_sequence(np.tile(p0, (T, 1, 1)), cfg.arena, cfg.r_max, cfg.eps)
    t0 = 0
    plans = []
    for i, (m, x) in enumerate(zip(cfg.models, cfg.initial_states)):
        start = steady_plan(m, x, T)
        try:
            plans.append(plan_periodic(m, W.for_agent(i), cfg.field, t0, candidate=start, settings=settings))
        except PlannerInfeasible as exc:
            raise PlannerInfeasible(f"iteration 0, agent {i}: {exc}") from exc
    log.cost_trace.append(sum(p.coverage_value for p in plans))
    for it in range(1, cfg.max_iters + 1):
        pos = np.stack([p.positions for p in plans], axis=1)
        W = shift(partition_sequence(pos, cfg.arena, cfg.r_max, cfg.eps), 1, ShiftMode.PERIODIC)
        t0 += 1
        new = []
        for i, m in enumerate(cfg.models):
            try:
                new.append(
                    plan_periodic(m, W.for_agent(i), cfg.field, t0, candidate=shift(plans[i], 1, ShiftMode.PERIODIC), settings=settings)
                )
            except PlannerInfeasible as exc:
                raise PlannerInfeasible(f"iteration {it}, agent {i}: {exc}") from exc
        plans = new
        log.cost_trace.append(sum(p.coverage_value for p in plans))
        if log.cost_trace[-2] - log.cost_trace[-1] < cfg.conv_tol:
            break
    log.plans = plans
    return log


# -- MPC coordination ---------------------------------------------------------------


@dataclass
class _Timed:
    """A sequence whose element 0 belongs to absolute time ``start``."""

    start: int
    length: int
    periodic: bool

    def idx(self, s):
        k = s - self.start
        return k % self.length if self.periodic else min(max(k, 0), self.length - 1)


class _Agent:
    """Per-agent worker: tracker state, active and pending plans."""

    def __init__(self, index, model: AgentModel, consts: TrackerConstants, x0):
        self.index = index
        self.model = model
        self.consts = consts
        self.x = np.array(x0, dtype=float)
        self.plan: ReferencePlan = None
        self.plan_t: _Timed = None
        self.pending: ReferencePlan = None
        self.solution: TrackerSolution = None
        self.candidate = None

    def reference(self, s0, count):
        k = np.array([self.plan_t.idx(s) for s in range(s0, s0 + count)])
        return self.plan.trajectory.states[k], self.plan.trajectory.inputs[k]

    def pending_inputs(self, s0, count, start):
        t = _Timed(start, self.pending.T, self.plan_t.periodic)
        k = np.array([t.idx(s) for s in range(s0, s0 + count)])
        return self.pending.trajectory.inputs[k]


def _eroded_slice(W: PartitionSequence, Wt: _Timed, i, s0, count):
    return [W.eroded[Wt.idx(s)][i] for s in range(s0, s0 + count)]


def _agent_cells(W: PartitionSequence, Wt: _Timed, i, s0, count) -> AgentCells:
    rows = [Wt.idx(s) for s in range(s0, s0 + count)]
    return AgentCells([W.cells[r][i] for r in rows], [W.eroded[r][i] for r in rows], [W.interior[r][i] for r in rows])


def _echo(cfg: FleetConfig) -> dict:
    return {
        "M": cfg.M,
        "T": cfg.T,
        "K": cfg.K,
        "N": cfg.N,
        "r_max": cfg.r_max,
        "eps": cfg.eps,
        "mode": cfg.mode.value,
        "seed": cfg.seed,
        "max_steps": cfg.max_steps,
        "pin_planner": cfg.pin_planner,
        "initial_states": cfg.initial_states.tolist(),
    }


def run_mpc(cfg: FleetConfig, steps: int = None, veto=None, raise_on_abort: bool = False) -> RunLog:
    """Closed-loop coverage MPC in the periodic or nonperiodic variant.

    ``veto(t, agent) -> bool`` optionally forces an agent's update vote to
    false (used to exercise the consensus rule).  Infeasibility aborts the
    run; the log then carries the diagnostic in ``aborted``.
    """
    cfg.validate()
    steps = cfg.max_steps if steps is None else steps
    periodic = cfg.mode == Mode.PERIODIC_MPC
    smode = cfg.shift_mode
    T, K, N, M = cfg.T, cfg.K, cfg.N, cfg.M
    settings = cfg.settings
    log = RunLog(cfg.mode, config_echo=_echo(cfg))
    bus = MessageBus(M)
    tag = Tag.PERIODIC if periodic else Tag.TERMINAL_STEADY_STATE

    agents = [_Agent(i, m, c.with_lipschitz(m), x) for i, (m, c, x) in enumerate(zip(cfg.models, cfg.consts, cfg.initial_states))]
    for i, a in enumerate(agents):
        if cfg.initial_plans is not None:
            a.plan = cfg.initial_plans[i]
        else:
            a.plan = steady_plan(a.model, a.x, T, tag)
        a.plan_t = _Timed(0, a.plan.T, periodic)
    p0 = cfg.initial_positions()
    W = partition_sequence(np.tile(p0, (T, 1, 1)), cfg.arena, cfg.r_max, cfg.eps)
    Wt = _Timed(0, T, periodic)
    cand_W = None
    positions = [p0.copy()]

    def plan_next(a: _Agent, t, V):
        """Reference for ``t + K`` planned in the current partitions."""
        cells = _agent_cells(W, Wt, a.index, t + K, T)
        prev = a.plan
        offset = t + K - a.plan_t.start  # index of time t + K inside the active plan
        if periodic:
            budget = 0.0 if cfg.pin_planner else coupling_budget(V, a.consts.V_max, a.consts.L_V, a.consts.decay, K).value
            return plan_periodic_coupled(a.model, cells, cfg.field, t + K, prev, budget, offset, N, settings)
        if cfg.pin_planner:
            return shift(prev, min(offset, prev.T), ShiftMode.NONPERIODIC)
        return plan_nonperiodic(a.model, cells, cfg.field, t + K, prev, offset, N, settings)

    t = 0
    try:
        for t in range(steps):
            swap = False
            swap_round = t % K == 0 and t > 0
            if swap_round:
                rnd = t // K
                for a in agents:
                    ref_u = a.pending_inputs(t - 1, N + 1, t)
                    cand = candidate_trajectory(a.solution, ref_u, a.model)
                    ok = check_update_condition(cand, _eroded_slice(cand_W, cand_Wt, a.index, t, N + 1), a.model)
                    if veto is not None and veto(t, a.index):
                        ok = False
                    a.candidate = cand
                    bus.post(RoundMessage(a.index, rnd, UpdateVote(ok)))
                votes = bus.gather(rnd, UpdateVote)
                if consensus_round([votes[i].ok for i in range(M)], M):
                    W, Wt = cand_W, cand_Wt
                    swap = True
                    log.swap_times.append(t)
                for a in agents:
                    a.plan, a.plan_t = a.pending, _Timed(t, a.pending.T, periodic)
                    a.pending = None

            # tracking step
            for a in agents:
                ref_x, ref_u = a.reference(t, N + 1)
                warm = None
                if swap_round:
                    warm = a.candidate
                elif a.solution is not None:
                    # previous solution re-expressed against the current reference
                    warm = candidate_trajectory(a.solution, a.reference(t - 1, N + 1)[1], a.model)
                try:
                    a.solution = solve_tracking(a.model, a.x, ref_x, ref_u, _eroded_slice(W, Wt, a.index, t, N + 1), a.consts, warm=warm)
                except TrackerInfeasible as exc:
                    raise TrackerInfeasible(str(exc), agent=a.index, step=t) from exc
            Vs = np.array([a.solution.value for a in agents])
            if t % K == 0 and t > 0:
                log.update_values.append((t, float(Vs.max())))

            if t % K == 0:
                rnd = t // K
                for a in agents:
                    try:
                        a.pending = plan_next(a, t, a.solution.value)
                    except PlannerInfeasible as exc:
                        raise PlannerInfeasible(f"step {t}, agent {a.index}: {exc}") from exc
                    bus.post(RoundMessage(a.index, rnd, ReferencePositions(a.pending.positions)))
                broadcast = bus.gather(rnd, ReferencePositions)
                stacked = np.stack([broadcast[i].positions for i in range(M)], axis=1)
                cand_W = partition_sequence(stacked, cfg.arena, cfg.r_max, cfg.eps)
                cand_Wt = _Timed(t + K, T, periodic)
                log.plan_history.append((t, [a.pending.coverage_value for a in agents]))

            pos = np.array([a.model.output(a.x) for a in agents])
            cells_now = [W.cells[Wt.idx(t)][i] for i in range(M)]
            own = all(bool(contains(W.eroded[Wt.idx(t)][i], pos[i], 1e-9)) for i in range(M))
            ref_pos = np.array([a.model.output(a.reference(t, 1)[0][0]) for a in agents])
            stage = np.array(
                [float(stage_cost(a.x, a.solution.first_input, *(r[0] for r in a.reference(t, 1)), a.consts.Q, a.consts.R)) for a in agents]
            )
            log.steps.append(
                StepRecord(
                    t,
                    pos,
                    Vs,
                    stage,
                    locational_cost(cfg.field, pos, cells_now, t, cfg.resolution),
                    locational_cost(cfg.field, ref_pos, cells_now, t, cfg.resolution),
                    min_pairwise_distance(pos) if M > 1 else float("inf"),
                    swap,
                    own,
                )
            )
            for a in agents:
                a.x = closed_loop_step(a.model, a.x, a.solution)
            positions.append(np.array([a.model.output(a.x) for a in agents]))
    except (TrackerInfeasible, PlannerInfeasible, BudgetDomain) as exc:
        log.aborted = f"{type(exc).__name__}: {exc}"
        log.abort_info = {"step": t, "agent": getattr(exc, "agent", None)}
        if raise_on_abort:
            raise
    log.positions = np.array(positions)
    log.plans = [a.plan for a in agents]
    return log


def run_periodic_mpc(cfg: FleetConfig, **kw) -> RunLog:
    if cfg.mode != Mode.PERIODIC_MPC:
        raise ConfigError("run_periodic_mpc needs mode PERIODIC_MPC")
    return run_mpc(cfg, **kw)


def run_nonperiodic_mpc(cfg: FleetConfig, **kw) -> RunLog:
    if cfg.mode != Mode.NONPERIODIC_MPC:
        raise ConfigError("run_nonperiodic_mpc needs mode NONPERIODIC_MPC")
    return run_mpc(cfg, **kw)


def run(cfg: FleetConfig, **kw) -> RunLog:
    if cfg.mode == Mode.LLOYD_PERIODIC:
        return run_lloyd_periodic(cfg)
    return run_mpc(cfg, **kw)
