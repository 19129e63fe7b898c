"""Augmented-Lagrangian trajectory optimisation backend.

Problems have simple variable bounds, smooth equality constraints, affine
inequalities ``A z <= b`` and optional smooth inequalities ``g(z) <= 0``.
Bounds are kept exact by the inner bound-constrained quasi-Newton solve
(L-BFGS-B); everything else is handled by first-order multiplier updates
with a growing quadratic penalty.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize


class Status(str, enum.Enum):
    OPTIMAL_LOCAL = "OPTIMAL_LOCAL"
    MAX_ITER = "MAX_ITER"
    INFEASIBLE = "INFEASIBLE"


@dataclass
class VariableLayout:
    """Stacked ``[x_0, ..., x_{S-1}, u_0, ..., u_{I-1}]`` decision vector."""

    n: int
    m: int
    num_states: int
    num_inputs: int

    @property
    def size(self) -> int:
        return self.n * self.num_states + self.m * self.num_inputs

    def state(self, k) -> slice:
        return slice(k * self.n, (k + 1) * self.n)

    def input(self, k) -> slice:
        o = self.n * self.num_states
        return slice(o + k * self.m, o + (k + 1) * self.m)

    def split(self, z):
        o = self.n * self.num_states
        return z[:o].reshape(self.num_states, self.n), z[o:].reshape(self.num_inputs, self.m)

    def join(self, states, inputs):
        return np.concatenate([np.ravel(states), np.ravel(inputs)])


class Shooting:
    """States and their sensitivities as functions of ``z = [x_0, u_0..u_{T-1}]``."""

    def __init__(self, model, T: int):
        self.model = model
        self.T = T
        self.lay = VariableLayout(model.n, model.m, 1, T)
        self.linear = hasattr(model, "A")
        self._key = None
        if self.linear:
            self._S = self._sensitivities(None, None)

    def _sensitivities(self, xs, us):
        n, lay = self.model.n, self.lay
        S = np.zeros((self.T + 1, n, lay.size))
        S[0][:, lay.state(0)] = np.eye(n)
        if xs is None:
            As = [self.model.A] * self.T
            Bs = [self.model.B] * self.T
        else:
            As, Bs = self.model.jacobians_along(xs[:-1], us)
        for k in range(self.T):
            # only columns up to input k are nonzero
            hi = lay.input(k).stop
            S[k + 1][:, :hi] = As[k] @ S[k][:, :hi]
            S[k + 1][:, lay.input(k)] += Bs[k]
        return S

    def __call__(self, z):
        key = z.tobytes()
        if key != self._key:
            x0, us = self.lay.split(z)
            if self.linear:
                xs = np.einsum("kis,s->ki", self._S, z)
                S = self._S
            else:
                xs = self.model.rollout(x0[0], us)
                S = self._sensitivities(xs, us)
            self._key, self._val = key, (xs, us, S)
        return self._val


@dataclass
class NlpProblem:
    """``min f(z)`` s.t. ``lb <= z <= ub``, ``c(z) = 0``, ``A z <= b``, ``g(z) <= 0``.

    ``objective`` returns ``(value, gradient)``; ``eq`` and ``ineq`` return
    ``(values, jacobian)`` with dense jacobians.
    """

    objective: Callable
    x0: np.ndarray
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    eq: Optional[Callable] = None
    A_ineq: Optional[np.ndarray] = None
    b_ineq: Optional[np.ndarray] = None
    ineq: Optional[Callable] = None
    layout: Optional[VariableLayout] = None
    lam0: Optional[np.ndarray] = None
    mu0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        size = self.x0.size
        self.lb = np.full(size, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(size, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.A_ineq is not None:
            self.A_ineq = np.atleast_2d(np.asarray(self.A_ineq, dtype=float))
            self.b_ineq = np.asarray(self.b_ineq, dtype=float).ravel()

    @property
    def size(self) -> int:
        return self.x0.size

    def equalities(self, z):
        if self.eq is None:
            return np.zeros(0), np.zeros((0, z.size))
        c, J = self.eq(z)
        return np.atleast_1d(np.asarray(c, dtype=float)), np.atleast_2d(np.asarray(J, dtype=float))

    def inequalities(self, z):
        """All inequalities stacked as ``h(z) <= 0`` with jacobian."""
        parts, jacs = [], []
        if self.A_ineq is not None and len(self.A_ineq):
            parts.append(self.A_ineq @ z - self.b_ineq)
            jacs.append(self.A_ineq)
        if self.ineq is not None:
            g, J = self.ineq(z)
            parts.append(np.atleast_1d(np.asarray(g, dtype=float)))
            jacs.append(np.atleast_2d(np.asarray(J, dtype=float)))
        if not parts:
            return np.zeros(0), np.zeros((0, z.size))
        return np.concatenate(parts), np.vstack(jacs)

    def violation(self, z) -> float:
        c, _ = self.equalities(z)
        h, _ = self.inequalities(z)
        v = 0.0
        if c.size:
            v = max(v, float(np.abs(c).max()))
        if h.size:
            v = max(v, float(np.maximum(h, 0.0).max()))
        v = max(v, float(np.maximum(self.lb - z, 0).max(initial=0.0)), float(np.maximum(z - self.ub, 0).max(initial=0.0)))
        return v


@dataclass
class SolverOptions:
    feas_tol: float = 1e-7
    opt_tol: float = 1e-6
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_cap: float = 1e10
    max_outer: int = 60
    inner_maxiter: int = 3000
    inner_gtol: float = 1e-10
    memory: int = 20
    log: Optional[object] = None  # path or writable text stream for the CSV iteration log


@dataclass
class NlpSolution:
    z: np.ndarray
    objective: float
    violation: float
    status: Status
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    outer_iterations: int = 0
    merits: list = field(default_factory=list)
    used_candidate: bool = False

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL_LOCAL


def _projected_gradient(z, grad, lb, ub) -> float:
    return float(np.abs(z - np.clip(z - grad, lb, ub)).max(initial=0.0))


def solve(problem: NlpProblem, opts: SolverOptions = None, candidate=None) -> NlpSolution:
    """Minimise ``problem``; optionally guard the result with a ``candidate``.

    If ``candidate`` is feasible (to ``feas_tol``) and the solver's result is
    infeasible or not better, the candidate is returned instead, with status
    MAX_ITER since its stationarity is not certified.
    """
    opts = opts or SolverOptions()
    lb, ub = problem.lb, problem.ub
    z = np.clip(problem.x0, lb, ub)
    c, _ = problem.equalities(z)
    h, _ = problem.inequalities(z)
    lam = np.zeros(c.size) if problem.lam0 is None else np.array(problem.lam0, dtype=float)
    mu = np.zeros(h.size) if problem.mu0 is None else np.maximum(np.array(problem.mu0, dtype=float), 0.0)
    rho = opts.rho0
    # diagonal variable scaling so every constraint column has unit-ish norm
    _, Jc0 = problem.equalities(z)
    _, Jh0 = problem.inequalities(z)
    col = np.sqrt((Jc0**2).sum(axis=0) + (Jh0**2).sum(axis=0))
    dscale = np.where(col > 0, 1.0 / np.clip(col, 1e-2, 1e2), 1.0)
    bounds = list(zip(np.where(np.isfinite(lb), lb / dscale, None), np.where(np.isfinite(ub), ub / dscale, None)))

    def scaled_merit(y, lam, mu, rho):
        val, grad = merit(y * dscale, lam, mu, rho)
        return val, grad * dscale

    def merit(zz, lam, mu, rho):
        f, g = problem.objective(zz)
        c, Jc = problem.equalities(zz)
        h, Jh = problem.inequalities(zz)
        val = f + lam @ c + 0.5 * rho * (c @ c)
        grad = g + Jc.T @ (lam + rho * c)
        if h.size:
            s = np.maximum(mu + rho * h, 0.0)
            val += (s @ s - mu @ mu) / (2.0 * rho)
            grad = grad + Jh.T @ s
        return val, grad

    writer = None
    close_log = None
    if opts.log is not None:
        stream = open(opts.log, "w", newline="") if isinstance(opts.log, (str, bytes)) or hasattr(opts.log, "__fspath__") else opts.log
        close_log = stream if stream is not opts.log else None
        writer = csv.writer(stream)
        writer.writerow(["outer_iter", "merit", "violation"])

    status = Status.MAX_ITER
    viol_prev = np.inf
    f_prev = np.inf
    merits = []
    outer = 0
    try:
        for outer in range(1, opts.max_outer + 1):
            m_before, mgrad = merit(z, lam, mu, rho)
            if outer == 1:
                # inner tolerances tighten geometrically from the initial gradient scale
                pg0 = max(_projected_gradient(z, mgrad, lb, ub), opts.inner_gtol)
            gtol = max(opts.inner_gtol, pg0 * 0.1**outer)
            res = minimize(
                scaled_merit,
                z / dscale,
                args=(lam, mu, rho),
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": opts.inner_maxiter, "ftol": 1e-16, "gtol": gtol, "maxcor": opts.memory},
            )
            z_new = np.clip(res.x * dscale, lb, ub)
            m_after, _ = merit(z_new, lam, mu, rho)
            if m_after <= m_before:
                z = z_new
            else:
                m_after = m_before
            merits.append((m_before, m_after))

            c, Jc = problem.equalities(z)
            h, Jh = problem.inequalities(z)
            viol = problem.violation(z)
            if writer is not None:
                writer.writerow([outer, repr(m_after), repr(viol)])
            lam = lam + rho * c
            if h.size:
                mu = np.maximum(mu + rho * h, 0.0)
            f, g = problem.objective(z)
            grad_l = g + Jc.T @ lam + (Jh.T @ mu if h.size else 0.0)
            pg = _projected_gradient(z, grad_l, lb, ub)
            if viol <= opts.feas_tol:
                if pg <= opts.opt_tol * max(1.0, float(np.abs(g).max(initial=0.0))):
                    status = Status.OPTIMAL_LOCAL
                    break
                # feasible twice in a row with a frozen objective: give up on
                # certifying stationarity and return the iterate as MAX_ITER
                if viol_prev <= opts.feas_tol and abs(f - f_prev) <= 1e-14 * max(1.0, abs(f)) and gtol <= opts.inner_gtol:
                    break
            f_prev = f
            if viol > 0.1 * viol_prev:
                rho *= opts.rho_growth
            if rho > opts.rho_cap:
                if viol > opts.feas_tol:
                    status = Status.INFEASIBLE
                break
            viol_prev = min(viol, viol_prev)
    finally:
        if close_log is not None:
            close_log.close()

    f, _ = problem.objective(z)
    sol = NlpSolution(z, float(f), problem.violation(z), status, lam, mu, outer, merits)
    if candidate is not None:
        cand = np.asarray(candidate, dtype=float).ravel()
        cviol = problem.violation(cand)
        if cviol <= opts.feas_tol:
            fc, _ = problem.objective(cand)
            solver_feasible = sol.violation <= opts.feas_tol
            if not solver_feasible or fc <= sol.objective:
                # stationarity of the candidate is not certified
                sol = NlpSolution(cand, float(fc), cviol, Status.MAX_ITER, lam, mu, outer, merits, used_candidate=True)
    return sol


@dataclass
class GradientReport:
    passed: bool
    max_rel_error: float
    failures: list


def check_gradients(problem: NlpProblem, n_points: int = 5, seed=0, rtol: float = 1e-5, step: float = 1e-6) -> GradientReport:
    """Central finite-difference check of objective and constraint jacobians."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    size = problem.size
    for p in range(n_points):
        z = problem.x0 + rng.normal(scale=0.1, size=size) * np.maximum(1.0, np.abs(problem.x0))
        z = np.clip(z, problem.lb, problem.ub)
        checks = [("objective", lambda zz: np.atleast_1d(problem.objective(zz)[0]), np.atleast_2d(problem.objective(z)[1]))]
        if problem.eq is not None:
            checks.append(("eq", lambda zz: problem.equalities(zz)[0], problem.equalities(z)[1]))
        if problem.ineq is not None or problem.A_ineq is not None:
            checks.append(("ineq", lambda zz: problem.inequalities(zz)[0], problem.inequalities(z)[1]))
        for name, fun, analytic in checks:
            fd = np.zeros_like(analytic)
            for j in range(size):
                hj = step * max(1.0, abs(z[j]))
                e = np.zeros(size)
                e[j] = hj
                fd[:, j] = (fun(z + e) - fun(z - e)) / (2 * hj)
            err = float(np.abs(fd - analytic).max(initial=0.0) / max(1.0, np.abs(analytic).max(initial=0.0)))
            worst = max(worst, err)
            if err > rtol:
                failures.append((name, p, err))
    return GradientReport(not failures, worst, failures)
