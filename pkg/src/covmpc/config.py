"""Experiment configuration: presets, TOML/JSON round trip, fleet construction."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomli_w

from .coordinator import FleetConfig, Mode
from .density import GaussianCircular, GaussianWaypointPath, Uniform, gaussian_static
from .dynamics import KinematicBicycle, SingleIntegrator2D
from .errors import ConfigError, CoverageError
from .geometry import ConvexPolygon
from .tracker import TrackerConstants, n_star


@dataclass
class ModelSpec:
    kind: str = "single_integrator"  # or "bicycle"
    dt: float = 0.1
    pos_bound: float = 2.0
    u_max: float = 1.0
    l_r: float = 0.05
    l_f: float = 0.05
    v_min: float = -0.5
    v_max: float = 2.0
    delta_max: float = 0.4
    a_max: float = 2.0
    lipschitz_f: Optional[float] = None

    def build(self):
        if self.kind == "single_integrator":
            return SingleIntegrator2D(self.dt, self.pos_bound, self.u_max, lipschitz_f=self.lipschitz_f)
        if self.kind == "bicycle":
            return KinematicBicycle(
                dt=self.dt,
                l_r=self.l_r,
                l_f=self.l_f,
                pos_bound=self.pos_bound,
                v_min=self.v_min,
                v_max=self.v_max,
                delta_max=self.delta_max,
                a_max=self.a_max,
                lipschitz_f=self.lipschitz_f,
            )
        raise ConfigError(f"unknown model kind {self.kind!r}")


@dataclass
class TrackerSpec:
    Q: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])
    R: list = field(default_factory=lambda: [[0.1, 0.0], [0.0, 0.1]])
    gamma_bar: float = 4.0
    alpha_N: float = 0.2
    V_max: float = 1.0
    L_V: float = 2.5


@dataclass
class DensitySpec:
    kind: str = "circular"  # circular | waypoints | static | uniform
    sigma: float = 0.5
    center: list = field(default_factory=lambda: [0.0, 0.0])
    radius: float = 0.9
    period: Optional[int] = 20
    waypoints: list = field(default_factory=list)  # rows (t, x, y)
    value: float = 1.0

    def build(self):
        if self.kind == "circular":
            return GaussianCircular(self.sigma, center=tuple(self.center), radius=self.radius, period=self.period)
        if self.kind == "waypoints":
            if len(self.waypoints) < 1:
                raise ConfigError("waypoint density needs at least one waypoint")
            return GaussianWaypointPath(self.sigma, waypoints=tuple(tuple(map(float, w)) for w in self.waypoints))
        if self.kind == "static":
            return gaussian_static(self.sigma, self.center)
        if self.kind == "uniform":
            return Uniform(self.value)
        raise ConfigError(f"unknown density kind {self.kind!r}")


@dataclass
class ExperimentConfig:
    name: str = "custom"
    mode: str = "PERIODIC_MPC"
    M: int = 4
    T: int = 20
    K: int = 5
    N: int = 10
    r_max: float = 0.055
    eps: float = 0.005
    arena: list = field(default_factory=lambda: [-2.0, 2.0, -2.0, 2.0])
    model: ModelSpec = field(default_factory=ModelSpec)
    tracker: TrackerSpec = field(default_factory=TrackerSpec)
    density: DensitySpec = field(default_factory=DensitySpec)
    # (M, 2) start positions; empty means seeded random placement
    initial_positions: list = field(default_factory=list)
    seed: int = 0
    steps: int = 200
    resolution: float = 1.0
    conv_tol: float = 1e-6
    max_iters: int = 50
    out: str = "out"
    plots: bool = True

    # -- serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        return _drop_none(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        subs = {"model": ModelSpec, "tracker": TrackerSpec, "density": DensitySpec}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in d.items():
            if key in subs:
                sub_known = {f.name for f in fields(subs[key])}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                kw[key] = subs[key](**value)
            else:
                kw[key] = value
        try:
            cfg = cls(**kw)
            Mode(cfg.mode)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def dumps(self, fmt: str = "toml") -> str:
        if fmt == "json":
            return json.dumps(self.to_dict(), indent=2, sort_keys=True)
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str, fmt: str = "toml") -> "ExperimentConfig":
        try:
            data = json.loads(text) if fmt == "json" else tomli.loads(text)
        except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path):
        path = Path(path)
        path.write_text(self.dumps("json" if path.suffix == ".json" else "toml"))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        return cls.loads(path.read_text(), "json" if path.suffix == ".json" else "toml")

    # -- construction ---------------------------------------------------------------
    def constants(self, model) -> TrackerConstants:
        t = self.tracker
        return TrackerConstants(np.array(t.Q), np.array(t.R), t.gamma_bar, t.alpha_N, t.V_max, t.L_V, self.N, self.K, model.lipschitz_f)

    def arena_polygon(self) -> ConvexPolygon:
        return ConvexPolygon.box(*self.arena)

    def validate(self) -> "ExperimentConfig":
        """Static checks, including the horizon lower bound."""
        try:
            Mode(self.mode)
            if self.M < 1:
                raise ConfigError("M must be positive")
            model = self.model.build()
            consts = self.constants(model)
            bound = n_star(consts)
            if self.N < bound:
                raise ConfigError(f"horizon N={self.N} is below the required lower bound N*={bound}")
            if len(self.initial_positions) not in (0, self.M):
                raise ConfigError("initial_positions must list one position per agent")
            self.density.build()
        except ConfigError:
            raise
        except CoverageError as exc:
            raise ConfigError(str(exc)) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def initial_states(self, model) -> np.ndarray:
        pos = np.asarray(self.initial_positions, dtype=float).reshape(-1, 2)
        if len(pos) == 0:
            pos = random_positions(self.M, self.arena, 2 * (self.r_max + self.eps), self.r_max + self.eps, self.seed)
        states = []
        for p in pos:
            x = np.zeros(model.n)
            x[:2] = p
            states.append(x)
        return np.array(states)

    def fleet(self, seed: int = None) -> FleetConfig:
        cfg = self if seed is None else _with_seed(self, seed)
        cfg.validate()
        model_spec = cfg.model
        models = [model_spec.build() for _ in range(cfg.M)]
        lf = models[0].lipschitz_f
        for m in models[1:]:
            m.lipschitz_f = lf
        fleet = FleetConfig(
            models=models,
            consts=[cfg.constants(m) for m in models],
            arena=cfg.arena_polygon(),
            field=cfg.density.build(),
            initial_states=cfg.initial_states(models[0]),
            T=cfg.T,
            K=cfg.K,
            N=cfg.N,
            r_max=cfg.r_max,
            eps=cfg.eps,
            mode=Mode(cfg.mode),
            seed=cfg.seed,
            max_steps=cfg.steps,
            resolution=cfg.resolution,
            conv_tol=cfg.conv_tol,
            max_iters=cfg.max_iters,
        )
        try:
            fleet.validate()
        except CoverageError as exc:
            raise ConfigError(str(exc)) from exc
        return fleet


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    out.seed = seed
    return out


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def random_positions(M: int, arena, min_sep: float, margin: float, seed: int, spread: float = 0.6) -> np.ndarray:
    """Seeded rejection sampling of well-separated positions inside the arena.

    Samples are drawn from the central ``spread`` fraction of the arena and
    kept ``margin`` away from its boundary.
    """
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = arena
    cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
    hx = min((xmax - xmin) / 2 * spread, (xmax - xmin) / 2 - margin)
    hy = min((ymax - ymin) / 2 * spread, (ymax - ymin) / 2 - margin)
    for _ in range(10000):
        p = np.column_stack([rng.uniform(cx - hx, cx + hx, M), rng.uniform(cy - hy, cy + hy, M)])
        if M == 1:
            return p
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        # keep some slack beyond the hard minimum so Voronoi interiors are roomy
        if d.min() >= 4 * min_sep:
            return p
    raise ConfigError("could not place agents; arena too small")


# -- presets ------------------------------------------------------------------------------

# bicycle experiments: 33 ms sampling, circle radius 0.9 m with period 4.95 s -> 150 steps
_BICYCLE_MODEL = dict(kind="bicycle", dt=0.033, pos_bound=2.0, l_r=0.05, l_f=0.05, v_min=-0.5, v_max=2.0, delta_max=0.4, a_max=2.0)
_BICYCLE_TRACKER = dict(
    Q=[[180.0, 0, 0, 0], [0, 180.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]],
    R=[[0.1, 0.0], [0.0, 0.1]],
    gamma_bar=2.0,
    alpha_N=0.1,
    V_max=70.0,
    L_V=180.0,
)
_BICYCLE_COMMON = dict(M=4, N=20, r_max=0.055, eps=0.005, arena=[-2.0, 2.0, -2.0, 2.0])
_BICYCLE_WAYPOINTS = [[0, -1.0, -1.0], [300, 1.0, -1.0], [600, 1.0, 1.0], [900, -1.0, 1.0], [1200, 0.0, 0.0]]
_DESK_WAYPOINTS = [[0, -0.8, -0.8], [250, 0.8, -0.8], [500, 0.8, 0.8], [750, -0.8, 0.8], [1000, 0.0, 0.0]]


def _preset_dicts() -> dict:
    circle150 = dict(kind="circular", sigma=0.5, center=[0.0, 0.0], radius=0.9, period=150)
    circle20 = dict(kind="circular", sigma=0.5, center=[0.0, 0.0], radius=0.9, period=20)
    return {
        "periodic_circle": dict(
            _BICYCLE_COMMON, name="periodic_circle", mode="PERIODIC_MPC", T=150, K=190, steps=1500,
            model=_BICYCLE_MODEL, tracker=_BICYCLE_TRACKER, density=circle150,
        ),
        "nonperiodic_circle": dict(
            _BICYCLE_COMMON, name="nonperiodic_circle", mode="NONPERIODIC_MPC", T=100, K=30, steps=1500,
            model=_BICYCLE_MODEL, tracker=_BICYCLE_TRACKER, density=circle150,
        ),
        "nonperiodic_waypoints_K30": dict(
            _BICYCLE_COMMON, name="nonperiodic_waypoints_K30", mode="NONPERIODIC_MPC", T=100, K=30, steps=1200,
            model=_BICYCLE_MODEL, tracker=_BICYCLE_TRACKER,
            density=dict(kind="waypoints", sigma=0.5, waypoints=_BICYCLE_WAYPOINTS),
        ),
        "nonperiodic_waypoints_K60": dict(
            _BICYCLE_COMMON, name="nonperiodic_waypoints_K60", mode="NONPERIODIC_MPC", T=100, K=60, steps=1200,
            model=_BICYCLE_MODEL, tracker=_BICYCLE_TRACKER,
            density=dict(kind="waypoints", sigma=0.5, waypoints=_BICYCLE_WAYPOINTS),
        ),
        "lloyd_desk": dict(name="lloyd_desk", mode="LLOYD_PERIODIC", M=4, T=20, K=5, N=10, density=circle20),
        "periodic_desk": dict(name="periodic_desk", mode="PERIODIC_MPC", M=4, T=20, K=5, N=10, steps=1000, density=circle20),
        "nonperiodic_desk": dict(name="nonperiodic_desk", mode="NONPERIODIC_MPC", M=4, T=20, K=5, N=10, steps=1000, density=circle20),
        "waypoint_desk": dict(
            name="waypoint_desk", mode="NONPERIODIC_MPC", M=4, T=20, K=5, N=10, steps=1000,
            density=dict(kind="waypoints", sigma=0.5, waypoints=_DESK_WAYPOINTS),
        ),
    }


PRESETS = tuple(_preset_dicts())


def preset(name: str) -> ExperimentConfig:
    table = _preset_dicts()
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(table)}")
    return ExperimentConfig.from_dict(table[name])
