"""Convex polygon arithmetic for coverage partitions.

Polygons are stored twice over: as a counter-clockwise vertex loop and as
one halfplane ``n . q <= b`` per edge (edge ``i`` runs from vertex ``i`` to
vertex ``i + 1`` and lies on halfplane ``i``).  Clipping keeps both views in
sync, so redundant halfplanes never accumulate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import CoincidentGenerators, EmptyPolygon, OutsideArena, TooFewAgents

GEOM_TOL = 1e-9
_DUP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    """Convex polygon in the plane; zero vertices means EMPTY."""

    vertices: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    _area: float = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("vertices", "normals", "offsets"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- constructors -----------------------------------------------------
    @classmethod
    def empty(cls) -> "ConvexPolygon":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def from_vertices(cls, points) -> "ConvexPolygon":
        """Build from a vertex loop (either orientation); must be convex."""
        v = np.asarray(points, dtype=float).reshape(-1, 2)
        v = _dedupe(v)
        if len(v) < 3 or abs(_signed_area(v)) < 1e-14:
            return cls.empty()
        if _signed_area(v) < 0:
            v = v[::-1].copy()
        d = np.roll(v, -1, axis=0) - v
        cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
        if np.any(cross < -1e-12 * max(1.0, np.abs(d).max() ** 2)):
            raise ValueError("vertex loop is not convex")
        normals = np.column_stack([d[:, 1], -d[:, 0]])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        offsets = np.einsum("ij,ij->i", normals, v)
        return cls(v, normals, offsets)

    @classmethod
    def box(cls, xmin, xmax, ymin, ymax) -> "ConvexPolygon":
        return cls.from_vertices([(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)])

    @classmethod
    def from_halfplanes(cls, normals, offsets, bound=1e6) -> "ConvexPolygon":
        poly = cls.box(-bound, bound, -bound, bound)
        for n, b in zip(np.asarray(normals, float), np.asarray(offsets, float)):
            poly = poly.clip(n, b)
            if poly.is_empty:
                break
        return poly

    # -- basic properties -------------------------------------------------
    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    @property
    def area(self) -> float:
        if self._area is None:
            a = 0.0 if self.is_empty else _signed_area(self.vertices)
            object.__setattr__(self, "_area", a)
        return self._area

    @property
    def centroid(self) -> np.ndarray:
        """Area centroid."""
        if self.is_empty:
            raise EmptyPolygon("centroid of an empty polygon")
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        return ((v + w) * cross[:, None]).sum(axis=0) / (6.0 * self.area)

    @property
    def diameter(self) -> float:
        if self.is_empty:
            return 0.0
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        if self.is_empty:
            return "ConvexPolygon(EMPTY)"
        return f"ConvexPolygon({len(self)} vertices, area={self.area:.6g})"

    # -- operations -------------------------------------------------------
    def clip(self, normal, offset) -> "ConvexPolygon":
        """Intersect with the halfplane ``normal . q <= offset``."""
        if self.is_empty:
            return self
        n = np.asarray(normal, dtype=float)
        nn = np.linalg.norm(n)
        n, b = n / nn, float(offset) / nn
        v = self.vertices
        s = v @ n - b
        tol = _DUP_TOL * max(1.0, np.abs(v).max())
        inside = s <= tol
        if inside.all():
            return self
        if not inside.any():
            return ConvexPolygon.empty()

        out_v, out_n, out_b = [], [], []
        k = len(v)
        for i in range(k):
            j = (i + 1) % k
            if inside[i]:
                out_v.append(v[i])
                out_n.append(self.normals[i])
                out_b.append(self.offsets[i])
                if not inside[j]:
                    lam = s[i] / (s[i] - s[j])
                    out_v.append(v[i] + lam * (v[j] - v[i]))
                    out_n.append(n)
                    out_b.append(b)
            elif inside[j]:
                lam = s[i] / (s[i] - s[j])
                out_v.append(v[i] + lam * (v[j] - v[i]))
                out_n.append(self.normals[i])
                out_b.append(self.offsets[i])
        return _assemble(np.array(out_v), np.array(out_n), np.array(out_b))

    def to_json(self) -> str:
        return json.dumps(self.vertices.tolist())

    @classmethod
    def from_json(cls, text: str) -> "ConvexPolygon":
        return cls.from_vertices(json.loads(text))


def _signed_area(v: np.ndarray) -> float:
    w = np.roll(v, -1, axis=0)
    return 0.5 * float(np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]))


def _dedupe(v: np.ndarray) -> np.ndarray:
    keep = np.linalg.norm(v - np.roll(v, -1, axis=0), axis=1) > _DUP_TOL
    return v[keep] if keep.any() else v[:1]


def _assemble(v, normals, offsets) -> ConvexPolygon:
    # a vertex whose outgoing edge has zero length is dropped; the edge
    # leaving the coincident successor keeps its label
    keep = np.linalg.norm(v - np.roll(v, -1, axis=0), axis=1) > _DUP_TOL
    v, normals, offsets = v[keep], normals[keep], offsets[keep]
    if len(v) < 3 or _signed_area(v) < 1e-14:
        return ConvexPolygon.empty()
    return ConvexPolygon(v, normals, offsets)


def erode(poly: ConvexPolygon, radius: float) -> ConvexPolygon:
    """Pontryagin difference ``poly - disk(radius)``.

    Exact for convex polygons: every halfplane is moved inward by ``radius``
    and the offsets are re-intersected.  May return an EMPTY polygon.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if poly.is_empty or radius == 0:
        return poly
    out = poly
    for n, b in zip(poly.normals, poly.offsets):
        out = out.clip(n, b - radius)
        if out.is_empty:
            break
    return out


def contains(poly: ConvexPolygon, q, tol: float = 0.0):
    """Inclusive membership test ``n . q <= b + tol`` for every halfplane.

    ``q`` may be a single point or an ``(k, 2)`` array of points.
    """
    if poly.is_empty:
        raise EmptyPolygon("membership test on an empty polygon")
    q = np.asarray(q, dtype=float)
    s = q @ poly.normals.T - poly.offsets
    return np.all(s <= tol, axis=-1)


def voronoi_partition(positions, arena: ConvexPolygon, tol: float = GEOM_TOL) -> list[ConvexPolygon]:
    """Voronoi cells of ``positions`` restricted to ``arena``.

    Each cell is the arena clipped by the perpendicular bisectors towards
    every other generator.
    """
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    m = len(p)
    if not np.all(contains(arena, p, tol)):
        bad = np.flatnonzero(~contains(arena, p, tol))
        raise OutsideArena(f"generators {bad.tolist()} lie outside the arena")
    if m >= 2:
        diff = p[:, None, :] - p[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= tol:
            i, j = np.unravel_index(np.argmin(dist), dist.shape)
            raise CoincidentGenerators(f"generators {i} and {j} coincide")

    cells = []
    for i in range(m):
        cell = arena
        for j in range(m):
            if j == i:
                continue
            n = p[j] - p[i]
            cell = cell.clip(n, n @ (p[i] + p[j]) / 2.0)
        cells.append(cell)
    return cells


def min_pairwise_distance(positions) -> float:
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(p) < 2:
        raise TooFewAgents("need at least two positions")
    diff = p[:, None, :] - p[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    iu = np.triu_indices(len(p), k=1)
    return float(d[iu].min())


def min_pairwise_distance_bruteforce(positions) -> float:
    """Plain double loop; kept as the reference definition."""
    p = [np.asarray(x, dtype=float) for x in positions]
    if len(p) < 2:
        raise TooFewAgents("need at least two positions")
    return min(float(np.linalg.norm(a - b)) for a, b in combinations(p, 2))


@dataclass(frozen=True)
class AgentCells:
    """Per-agent view of a partition sequence: lists indexed by time."""

    cells: list
    eroded: list
    interior: list

    def __len__(self):
        return len(self.cells)


@dataclass(frozen=True)
class PartitionSequence:
    """Time-indexed Voronoi partitions with their two tightened versions.

    ``cells[k][i]`` is agent ``i``'s cell at prediction step ``k``;
    ``eroded`` removes the agent radius and ``interior`` additionally the
    margin ``eps``.
    """

    cells: list
    eroded: list
    interior: list

    def __len__(self):
        return len(self.cells)

    @property
    def num_agents(self) -> int:
        return len(self.cells[0])

    def for_agent(self, i: int) -> AgentCells:
        return AgentCells(
            [row[i] for row in self.cells],
            [row[i] for row in self.eroded],
            [row[i] for row in self.interior],
        )

    def take(self, indices) -> "PartitionSequence":
        idx = list(indices)
        return PartitionSequence(
            [self.cells[k] for k in idx],
            [self.eroded[k] for k in idx],
            [self.interior[k] for k in idx],
        )


def partition_sequence(position_seq, arena: ConvexPolygon, r_max: float, eps: float) -> PartitionSequence:
    """Voronoi partition for every time index of ``position_seq`` (T, M, 2)."""
    seq = np.asarray(position_seq, dtype=float)
    cells, eroded, interior = [], [], []
    cache = {}
    for row in seq:
        key = row.tobytes()
        if key not in cache:
            c = voronoi_partition(row, arena)
            e = [erode(x, r_max) for x in c]
            cache[key] = (c, e, [erode(x, eps) for x in e])
        c, e, it = cache[key]
        cells.append(c)
        eroded.append(e)
        interior.append(it)
    return PartitionSequence(cells, eroded, interior)
