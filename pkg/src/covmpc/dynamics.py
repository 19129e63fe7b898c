"""Discrete-time agent models, output maps and Lipschitz metadata."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


class AgentModel:
    """Base class for ``x+ = f(x, u)``, ``p = C x`` with box constraints.

    Subclasses provide ``_f`` (vectorised over leading axes) and
    ``jacobians``.  ``lipschitz_f`` is the state Lipschitz constant used by
    the horizon bounds; it is estimated on first access when not given.
    """

    n: int
    m: int

    def __init__(self, dt, x_lb, x_ub, u_lb, u_ub, C, lipschitz_f=None):
        self.dt = float(dt)
        self.x_lb = np.asarray(x_lb, dtype=float)
        self.x_ub = np.asarray(x_ub, dtype=float)
        self.u_lb = np.asarray(u_lb, dtype=float)
        self.u_ub = np.asarray(u_ub, dtype=float)
        self.C = np.asarray(C, dtype=float)
        if self.x_lb.shape != (self.n,) or self.x_ub.shape != (self.n,):
            raise DimensionMismatch("state box does not match state dimension")
        if self.u_lb.shape != (self.m,) or self.u_ub.shape != (self.m,):
            raise DimensionMismatch("input box does not match input dimension")
        if np.any(self.x_lb > self.x_ub) or np.any(self.u_lb > self.u_ub):
            raise ValueError("empty constraint box")
        if self.C.shape != (2, self.n) or np.linalg.matrix_rank(self.C) != 2:
            raise DimensionMismatch("output matrix must be 2 x n with full row rank")
        self._lipschitz_f = None if lipschitz_f is None else float(lipschitz_f)

    @property
    def lipschitz_f(self) -> float:
        if self._lipschitz_f is None:
            self._lipschitz_f = estimate_lipschitz(self, 2000, seed=0)
        return self._lipschitz_f

    @lipschitz_f.setter
    def lipschitz_f(self, value):
        self._lipschitz_f = float(value)

    # -- dynamics ---------------------------------------------------------
    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1] != self.n or u.shape[-1] != self.m:
            raise DimensionMismatch(f"expected x in R^{self.n}, u in R^{self.m}, got {x.shape}, {u.shape}")
        return self._f(x, u)

    def _f(self, x, u):
        raise NotImplementedError

    def jacobians(self, x, u):
        """``(df/dx, df/du)`` at a single point."""
        raise NotImplementedError

    def jacobians_along(self, xs, us):
        """Stacked jacobians ``(T, n, n)``, ``(T, n, m)`` along a trajectory."""
        pairs = [self.jacobians(x, u) for x, u in zip(xs, us)]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def output(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DimensionMismatch(f"expected x in R^{self.n}, got {x.shape}")
        return x @ self.C.T

    def rollout(self, x0, inputs) -> np.ndarray:
        xs = [np.asarray(x0, dtype=float)]
        for u in np.asarray(inputs, dtype=float):
            xs.append(self._f(xs[-1], u))
        return np.array(xs)

    def steady_input(self, x):
        """An input ``u`` with ``f(x, u) = x`` inside the input box, or None."""
        return None

    # -- boxes ------------------------------------------------------------
    def state_box(self, margin: float = 0.0):
        return self.x_lb + margin, self.x_ub - margin

    def input_box(self, margin: float = 0.0):
        return self.u_lb + margin, self.u_ub - margin

    def in_state_box(self, x, tol: float = 1e-9, margin: float = 0.0):
        lb, ub = self.state_box(margin)
        x = np.asarray(x, dtype=float)
        return np.all((x >= lb - tol) & (x <= ub + tol), axis=-1)

    def in_input_box(self, u, tol: float = 1e-9, margin: float = 0.0):
        lb, ub = self.input_box(margin)
        u = np.asarray(u, dtype=float)
        return np.all((u >= lb - tol) & (u <= ub + tol), axis=-1)


class LinearSystem(AgentModel):
    def __init__(self, A, B, dt, x_lb, x_ub, u_lb, u_ub, C, lipschitz_f=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n, self.m = self.B.shape
        super().__init__(dt, x_lb, x_ub, u_lb, u_ub, C, lipschitz_f)

    def _f(self, x, u):
        return x @ self.A.T + u @ self.B.T

    def jacobians(self, x, u):
        return self.A, self.B

    def steady_input(self, x):
        u, *_ = np.linalg.lstsq(self.B, x - self.A @ x, rcond=None)
        if np.allclose(self.A @ x + self.B @ u, x, atol=1e-12, rtol=0):
            return u
        return None


class SingleIntegrator2D(LinearSystem):
    """``p+ = p + dt u`` in the plane."""

    def __init__(self, dt=0.1, pos_bound=2.0, u_max=1.0, lipschitz_f=None):
        super().__init__(
            np.eye(2),
            dt * np.eye(2),
            dt,
            [-pos_bound] * 2,
            [pos_bound] * 2,
            [-u_max] * 2,
            [u_max] * 2,
            np.eye(2),
            lipschitz_f,
        )
        self.pos_bound = pos_bound
        self.u_max = u_max

    def steady_input(self, x):
        return np.zeros(2)


class KinematicBicycle(AgentModel):
    """Kinematic bicycle, state ``(px, py, psi, v)``, input ``(delta, a)``.

    Discretised by one RK4 step of length ``dt``.
    """

    n = 4
    m = 2

    def __init__(
        self,
        dt=0.033,
        l_r=0.05,
        l_f=0.05,
        pos_bound=2.0,
        psi_bound=2 * np.pi,
        v_min=0.1,
        v_max=2.0,
        delta_max=0.4,
        a_max=2.0,
        lipschitz_f=None,
    ):
        self.l_r = float(l_r)
        self.l_f = float(l_f)
        super().__init__(
            dt,
            [-pos_bound, -pos_bound, -psi_bound, v_min],
            [pos_bound, pos_bound, psi_bound, v_max],
            [-delta_max, -a_max],
            [delta_max, a_max],
            np.hstack([np.eye(2), np.zeros((2, 2))]),
            lipschitz_f,
        )

    def _slip(self, delta):
        kappa = self.l_r / (self.l_r + self.l_f)
        return np.arctan(kappa * np.tan(delta))

    def continuous(self, x, u):
        psi, v = x[..., 2], x[..., 3]
        delta, a = u[..., 0], u[..., 1]
        beta = self._slip(delta)
        return np.stack(
            [v * np.cos(psi + beta), v * np.sin(psi + beta), v / self.l_r * np.sin(beta), a + 0.0 * v],
            axis=-1,
        )

    def _continuous_jac(self, x, u):
        psi, v = x[..., 2], x[..., 3]
        delta = u[..., 0]
        kappa = self.l_r / (self.l_r + self.l_f)
        beta = self._slip(delta)
        dbeta = kappa / np.cos(delta) ** 2 / (1.0 + (kappa * np.tan(delta)) ** 2)
        c, s = np.cos(psi + beta), np.sin(psi + beta)
        A = np.zeros(psi.shape + (4, 4))
        B = np.zeros(psi.shape + (4, 2))
        A[..., 0, 2], A[..., 0, 3] = -v * s, c
        A[..., 1, 2], A[..., 1, 3] = v * c, s
        A[..., 2, 3] = np.sin(beta) / self.l_r
        B[..., 0, 0] = -v * s * dbeta
        B[..., 1, 0] = v * c * dbeta
        B[..., 2, 0] = v / self.l_r * np.cos(beta) * dbeta
        B[..., 3, 1] = 1.0
        return A, B

    def _f(self, x, u):
        h = self.dt
        k1 = self.continuous(x, u)
        k2 = self.continuous(x + 0.5 * h * k1, u)
        k3 = self.continuous(x + 0.5 * h * k2, u)
        k4 = self.continuous(x + h * k3, u)
        return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def _f_scalar(self, x, u):
        # plain floats: much cheaper than tiny numpy arrays inside a sequential rollout
        h, lr = self.dt, self.l_r
        beta = math.atan(lr / (lr + self.l_f) * math.tan(u[0]))
        sb, a = math.sin(beta) / lr, u[1]

        def rhs(psi, v):
            return v * math.cos(psi + beta), v * math.sin(psi + beta), v * sb, a

        px, py, psi, v = x
        k1 = rhs(psi, v)
        k2 = rhs(psi + 0.5 * h * k1[2], v + 0.5 * h * k1[3])
        k3 = rhs(psi + 0.5 * h * k2[2], v + 0.5 * h * k2[3])
        k4 = rhs(psi + h * k3[2], v + h * k3[3])
        return [xi + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4) for xi, a1, a2, a3, a4 in zip(x, k1, k2, k3, k4)]

    def rollout(self, x0, inputs) -> np.ndarray:
        xs = [[float(v) for v in x0]]
        for u in np.asarray(inputs, dtype=float).tolist():
            xs.append(self._f_scalar(xs[-1], u))
        return np.array(xs)

    def jacobians(self, x, u):
        """RK4 jacobians; broadcasts over leading axes of ``x`` and ``u``."""
        h = self.dt
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        eye = np.eye(4)
        k1 = self.continuous(x, u)
        A1, B1 = self._continuous_jac(x, u)
        x2 = x + 0.5 * h * k1
        k2 = self.continuous(x2, u)
        A2, B2 = self._continuous_jac(x2, u)
        x3 = x + 0.5 * h * k2
        k3 = self.continuous(x3, u)
        A3, B3 = self._continuous_jac(x3, u)
        A4, B4 = self._continuous_jac(x + h * k3, u)
        dk1x, dk1u = A1, B1
        dk2x, dk2u = A2 @ (eye + 0.5 * h * dk1x), A2 @ (0.5 * h * dk1u) + B2
        dk3x, dk3u = A3 @ (eye + 0.5 * h * dk2x), A3 @ (0.5 * h * dk2u) + B3
        dk4x, dk4u = A4 @ (eye + h * dk3x), A4 @ (h * dk3u) + B4
        Ax = eye + h / 6.0 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
        Bu = h / 6.0 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
        return Ax, Bu

    def jacobians_along(self, xs, us):
        return self.jacobians(xs, us)

    def steady_input(self, x):
        if abs(x[3]) > 0:
            return None
        u = np.zeros(2)
        return u if self.in_input_box(u) else None


def output(model: AgentModel, x):
    return model.output(x)


def estimate_lipschitz(model: AgentModel, samples: int = 2000, seed=0, safety: float = 1.1) -> float:
    """Sampled state Lipschitz constant of ``f`` (max ratio times ``safety``)."""
    if samples < 1000:
        raise ValueError("use at least 1000 samples")
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(model.x_lb, model.x_ub, size=(samples, model.n))
    # half the pairs are local perturbations so the sup of the derivative is probed
    x2 = rng.uniform(model.x_lb, model.x_ub, size=(samples, model.n))
    half = samples // 2
    scale = 1e-3 * (model.x_ub - model.x_lb)
    x2[:half] = np.clip(x1[:half] + rng.normal(size=(half, model.n)) * scale, model.x_lb, model.x_ub)
    u = rng.uniform(model.u_lb, model.u_ub, size=(samples, model.m))
    num = np.linalg.norm(model.step(x1, u) - model.step(x2, u), axis=1)
    den = np.linalg.norm(x1 - x2, axis=1)
    ok = den > 1e-12
    return safety * float((num[ok] / den[ok]).max())


class Tag(str, enum.Enum):
    PERIODIC = "PERIODIC"
    TERMINAL_STEADY_STATE = "TERMINAL_STEADY_STATE"
    PLAIN = "PLAIN"


@dataclass
class Trajectory:
    """State sequence (L+1, n) paired with an input sequence (L, m)."""

    states: np.ndarray
    inputs: np.ndarray
    tag: Tag = Tag.PLAIN
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if len(self.states) != len(self.inputs) + 1:
            raise DimensionMismatch("need exactly one more state than inputs")

    @property
    def length(self) -> int:
        return len(self.inputs)

    def positions(self, model: AgentModel) -> np.ndarray:
        return model.output(self.states)

    def dynamics_residual(self, model: AgentModel) -> float:
        if self.length == 0:
            return 0.0
        return float(np.abs(model.step(self.states[:-1], self.inputs) - self.states[1:]).max())

    def check(self, model: AgentModel, tol: float = 1e-8) -> bool:
        ok = self.dynamics_residual(model) <= tol
        if self.tag == Tag.PERIODIC:
            ok &= bool(np.abs(self.states[0] - self.states[-1]).max() <= tol)
        elif self.tag == Tag.TERMINAL_STEADY_STATE:
            last = self.states[-2]
            ok &= bool(np.abs(model.step(last, self.inputs[-1]) - last).max() <= tol)
        return bool(ok)

    def to_dict(self, model: AgentModel = None) -> dict:
        d = {"states": self.states.tolist(), "inputs": self.inputs.tolist(), "tag": self.tag.value}
        if model is not None:
            d["positions"] = self.positions(model).tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "Trajectory":
        return cls(np.array(d["states"]), np.array(d["inputs"]), Tag(d["tag"]))
