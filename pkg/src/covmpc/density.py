"""Time-varying density fields and the integrals built on them.

All integrals over a convex cell share one quadrature: the cell is fanned
into triangles from its vertex centroid, each triangle is uniformly
subdivided until its diameter is below ``h_max`` and a 12-point symmetric
degree-6 rule is applied on every sub-triangle.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import EmptyPolygon, ShapeMismatch
from .geometry import ConvexPolygon

MASS_FLOOR = 1e-12

# Dunavant degree-6 rule: (weight, barycentric orbit generator)
_D6_ORBITS = [
    (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
    (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
    (0.082851075618374, (0.053145049844817, 0.310352451033784, 0.636502499121399)),
]


def _d6_rule():
    pts, wts = [], []
    for w, (a, b, c) in _D6_ORBITS:
        perms = {(a, b, c), (b, c, a), (c, a, b), (a, c, b), (c, b, a), (b, a, c)}
        for p in sorted(perms):
            pts.append(p)
            wts.append(w)
    pts, wts = np.array(pts), np.array(wts)
    return pts, wts / wts.sum()


D6_POINTS, D6_WEIGHTS = _d6_rule()


@lru_cache(maxsize=16)
def _subdivided_rule(level: int):
    """Barycentric points/weights of the degree-6 rule on ``4**level`` sub-triangles."""
    tris = [np.eye(3)]
    for _ in range(level):
        nxt = []
        for t in tris:
            a, b, c = t
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            nxt += [np.array(x) for x in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))]
        tris = nxt
    tris = np.array(tris)  # (S, 3 corners, 3 bary)
    pts = np.einsum("qc,scb->sqb", D6_POINTS, tris).reshape(-1, 3)
    wts = np.tile(D6_WEIGHTS, len(tris)) / len(tris)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def quadrature_nodes(poly: ConvexPolygon, h_max: float = np.inf):
    """Quadrature nodes ``(k, 2)`` and weights ``(k,)`` with ``sum(w) = area``."""
    if poly.is_empty:
        raise EmptyPolygon("quadrature over an empty polygon")
    v = poly.vertices
    center = v.mean(axis=0)
    nodes, weights = [], []
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        tri = np.array([center, a, b])
        area = 0.5 * abs((a[0] - center[0]) * (b[1] - center[1]) - (b[0] - center[0]) * (a[1] - center[1]))
        if area <= 0:
            continue
        diam = max(np.linalg.norm(a - center), np.linalg.norm(b - center), np.linalg.norm(a - b))
        level = 0 if not np.isfinite(h_max) else max(0, int(np.ceil(np.log2(diam / h_max))))
        bary, w = _subdivided_rule(level)
        nodes.append(bary @ tri)
        weights.append(w * area)
    return np.concatenate(nodes), np.concatenate(weights)


# -- density fields -----------------------------------------------------------


class DensityField:
    """Nonnegative function ``phi(q, t)`` of position and time step.

    Subclasses implement ``__call__`` vectorised over the leading axes of
    ``q``.  ``period`` is the step period or ``None``; ``length_scale``
    drives the quadrature resolution (``inf`` for polynomial fields).
    """

    period: Optional[int] = None

    @property
    def length_scale(self) -> float:
        return np.inf

    def __call__(self, q, t) -> np.ndarray:
        raise NotImplementedError

    def h_max(self, resolution: float = 1.0) -> float:
        return self.length_scale / (2.0 * resolution)


@dataclass(frozen=True)
class Uniform(DensityField):
    value: float = 1.0
    period: Optional[int] = None

    def __call__(self, q, t):
        q = np.asarray(q, dtype=float)
        return np.full(q.shape[:-1], float(self.value))


@dataclass(frozen=True)
class _Gaussian(DensityField):
    sigma: float

    @property
    def length_scale(self):
        return self.sigma

    def mean(self, t) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, q, t):
        q = np.asarray(q, dtype=float)
        d = q - self.mean(t)
        return np.exp(-(d[..., 0] ** 2 + d[..., 1] ** 2) / (2.0 * self.sigma**2))


@dataclass(frozen=True)
class GaussianCircular(_Gaussian):
    """Unnormalised Gaussian whose mean runs around a circle once per period."""

    center: tuple = (0.0, 0.0)
    radius: float = 0.9
    period: Optional[int] = 150
    phase: float = 0.0

    def mean(self, t):
        if not self.period:
            return np.asarray(self.center, dtype=float)
        ang = self.phase + 2.0 * np.pi * t / self.period
        return np.asarray(self.center, dtype=float) + self.radius * np.array([np.cos(ang), np.sin(ang)])


@dataclass(frozen=True)
class GaussianWaypointPath(_Gaussian):
    """Gaussian whose mean interpolates ``(t, x, y)`` waypoints linearly.

    The mean is held at the first/last waypoint outside the time range.
    """

    waypoints: tuple = ((0.0, 0.0, 0.0),)
    period: Optional[int] = None

    def mean(self, t):
        wp = np.asarray(self.waypoints, dtype=float)
        return np.array([np.interp(t, wp[:, 0], wp[:, 1]), np.interp(t, wp[:, 0], wp[:, 2])])


@dataclass(frozen=True)
class CustomDensity(DensityField):
    func: Callable = None
    period: Optional[int] = None
    scale: float = np.inf

    @property
    def length_scale(self):
        return self.scale

    def __call__(self, q, t):
        return np.asarray(self.func(np.asarray(q, dtype=float), t), dtype=float)


def gaussian_static(sigma: float, center=(0.0, 0.0)) -> GaussianCircular:
    return GaussianCircular(sigma=sigma, center=tuple(center), radius=0.0, period=None)


def evaluate(field: DensityField, q, t):
    return field(q, t)


# -- integral quantities ------------------------------------------------------


@dataclass(frozen=True)
class MassCentroid:
    mass: float
    centroid: np.ndarray
    # second moment about the centroid, the ``d`` contribution of this cell
    spread: float = 0.0


def mass_centroid(field: DensityField, poly: ConvexPolygon, t, resolution: float = 1.0) -> MassCentroid:
    """Density mass, weighted centroid and centroidal second moment of ``poly``.

    Below ``MASS_FLOOR`` the mass is reported as zero and the area centroid
    is returned instead.
    """
    nodes, w = quadrature_nodes(poly, field.h_max(resolution))
    w = w * field(nodes, t)
    mass = float(w.sum())
    if mass < MASS_FLOOR:
        return MassCentroid(0.0, poly.centroid, 0.0)
    c = (w @ nodes) / mass
    d = nodes - c
    return MassCentroid(mass, c, float(w @ (d[:, 0] ** 2 + d[:, 1] ** 2)))


def cell_cost(field, poly, p, t, resolution: float = 1.0) -> float:
    """``int_poly ||q - p||^2 phi(q, t) dq``."""
    nodes, w = quadrature_nodes(poly, field.h_max(resolution))
    d = nodes - np.asarray(p, dtype=float)
    return float((w * field(nodes, t)) @ (d[:, 0] ** 2 + d[:, 1] ** 2))


def locational_cost(field, positions, partition, t, resolution: float = 1.0) -> float:
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(positions) != len(partition):
        raise ShapeMismatch(f"{len(positions)} positions for {len(partition)} cells")
    return sum(cell_cost(field, cell, p, t, resolution) for p, cell in zip(positions, partition))


@dataclass(frozen=True)
class HorizonCost:
    """Horizon coverage cost of one agent in integral and decomposed form.

    ``integral`` sums the per-step integrals directly; ``decomposed`` is
    ``sum_k m_k ||p_k - c_k||^2`` and ``d`` the position-independent rest.
    """

    integral: float
    decomposed: float
    d: float
    masses: np.ndarray
    centroids: np.ndarray

    @property
    def total(self) -> float:
        return self.decomposed + self.d


def cell_moments(field, cells, t0, resolution: float = 1.0):
    """Mass/centroid/spread arrays for ``cells[k]`` at time ``t0 + k``."""
    mc = [mass_centroid(field, c, t0 + k, resolution) for k, c in enumerate(cells)]
    return (
        np.array([x.mass for x in mc]),
        np.array([x.centroid for x in mc]).reshape(-1, 2),
        np.array([x.spread for x in mc]),
    )


def horizon_cost(field, position_seq, cells, t0, resolution: float = 1.0, moments=None) -> HorizonCost:
    p = np.asarray(position_seq, dtype=float).reshape(-1, 2)
    if len(p) != len(cells):
        raise ShapeMismatch(f"{len(p)} positions for {len(cells)} cells")
    masses, cents, spreads = moments if moments is not None else cell_moments(field, cells, t0, resolution)
    integral = sum(cell_cost(field, c, pk, t0 + k, resolution) for k, (c, pk) in enumerate(zip(cells, p)))
    decomposed = float(masses @ ((p - cents) ** 2).sum(axis=1))
    return HorizonCost(integral, decomposed, float(spreads.sum()), masses, cents)
