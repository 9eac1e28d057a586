"""Rotated boxes, slabs and renormalization boxes on the integer lattice."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

MEMBERSHIP_TOL = 1e-9


class GeometryError(ValueError):
    pass


def unit_steps(d: int) -> np.ndarray:
    """Unit vectors in the kernel order (+e1, -e1, ..., +ed, -ed)."""
    steps = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        steps[2 * i, i] = 1
        steps[2 * i + 1, i] = -1
    return steps


@dataclass(frozen=True)
class Direction:
    coords: tuple

    def __post_init__(self):
        c = tuple(float(x) for x in self.coords)
        if len(c) < 2:
            raise GeometryError("direction needs dimension >= 2")
        if abs(math.sqrt(sum(x * x for x in c)) - 1.0) > 1e-12:
            raise GeometryError(f"direction {c} is not a unit vector")
        object.__setattr__(self, "coords", c)

    @classmethod
    def of(cls, v) -> "Direction":
        """Normalize an arbitrary nonzero vector."""
        v = np.asarray(v, dtype=float)
        n = np.linalg.norm(v)
        if n == 0:
            raise GeometryError("zero vector has no direction")
        return cls(tuple(v / n))

    @classmethod
    def axis(cls, d: int, i: int = 0, sign: int = 1) -> "Direction":
        v = [0.0] * d
        v[i] = float(sign)
        return cls(tuple(v))

    @property
    def d(self) -> int:
        return len(self.coords)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.coords)


@dataclass(frozen=True, eq=False)
class Rotation:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GeometryError("rotation must be a square matrix")
        if np.max(np.abs(m.T @ m - np.eye(m.shape[0]))) > 1e-10:
            raise GeometryError("rotation is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > 1e-10:
            raise GeometryError("rotation does not have determinant +1")

    @classmethod
    def identity(cls, d: int) -> "Rotation":
        return cls(np.eye(d))

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def direction(self) -> Direction:
        return Direction(tuple(self.matrix[:, 0]))

    def __eq__(self, other):
        return isinstance(other, Rotation) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


def rotation_from_direction(l: Direction) -> Rotation:
    """Proper rotation whose first column is ``l``.

    d = 2 uses the explicit planar rotation.  For d >= 3 a Householder
    reflection is built from whichever of e1 -/+ l is better conditioned and
    one column is negated to bring the determinant back to +1.
    """
    if not isinstance(l, Direction):
        l = Direction(tuple(l))
    v = l.vector
    d = l.d
    if d == 2:
        return Rotation(np.array([[v[0], -v[1]], [v[1], v[0]]]))
    e1 = np.zeros(d)
    e1[0] = 1.0
    if v[0] > 0:
        u = e1 + v
        h = np.eye(d) - 2.0 * np.outer(u, u) / (u @ u)
        h[:, 0] *= -1.0  # h e1 was -l
    else:
        u = e1 - v
        h = np.eye(d) - 2.0 * np.outer(u, u) / (u @ u)
        h[:, -1] *= -1.0
    h[:, 0] = v
    return Rotation(h)


@dataclass(frozen=True)
class BoxSpec:
    """Box R((-neg_extent, pos_extent) x (-transverse, transverse)^(d-1))."""

    rotation: Rotation
    neg_extent: float
    pos_extent: float
    transverse: float

    def __post_init__(self):
        for name in ("neg_extent", "pos_extent", "transverse"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be strictly positive")

    @classmethod
    def criterion(cls, rotation: Rotation, L: float, transverse: float) -> "BoxSpec":
        """The (R, L-2, L+2, Ltilde) box used by the effective criterion."""
        return cls(rotation, L - 2.0, L + 2.0, transverse)

    @property
    def d(self) -> int:
        return self.rotation.d

    @property
    def scale(self) -> float:
        """L for criterion boxes (neg_extent = L - 2)."""
        return self.neg_extent + 2.0

    def is_criterion_shaped(self) -> bool:
        return abs(self.pos_extent - self.neg_extent - 4.0) < 1e-12

    def to_record(self) -> dict:
        return {
            "d": self.d,
            "rotation": [float(x) for x in self.rotation.matrix.ravel()],
            "neg_extent": self.neg_extent,
            "pos_extent": self.pos_extent,
            "transverse": self.transverse,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "BoxSpec":
        d = int(rec["d"])
        m = np.array(rec["rotation"], dtype=float).reshape(d, d)
        return cls(Rotation(m), float(rec["neg_extent"]), float(rec["pos_extent"]),
                   float(rec["transverse"]))


def _sorted_unique(sites: np.ndarray, d: int) -> np.ndarray:
    if len(sites) == 0:
        return np.zeros((0, d), dtype=np.int64)
    return np.unique(np.asarray(sites, dtype=np.int64), axis=0)


def _contains(sorted_sites: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row membership of ``query`` in lexicographically sorted ``sorted_sites``."""
    if len(sorted_sites) == 0:
        return np.zeros(len(query), dtype=bool)
    a = np.ascontiguousarray(sorted_sites)
    q = np.ascontiguousarray(query, dtype=np.int64)
    dt = np.dtype([(f"f{i}", np.int64) for i in range(a.shape[1])])
    av = a.view(dt).ravel()
    qv = q.view(dt).ravel()
    pos = np.searchsorted(av, qv)
    pos = np.minimum(pos, len(av) - 1)
    return av[pos] == qv


@dataclass(frozen=True, eq=False)
class Region:
    """Finite lattice region with its outer 1-norm boundary.

    ``target`` flags the boundary sites counted as a successful exit (the
    positive face of a box, or the star boundary of a renormalization box).
    """

    interior: np.ndarray
    boundary: np.ndarray
    target: np.ndarray

    @classmethod
    def from_interior(cls, interior: np.ndarray, target_fn=None) -> "Region":
        interior = np.asarray(interior, dtype=np.int64)
        if interior.ndim != 2 or len(interior) == 0:
            raise GeometryError("region has an empty interior")
        d = interior.shape[1]
        interior = _sorted_unique(interior, d)
        nbrs = (interior[:, None, :] + unit_steps(d)[None, :, :]).reshape(-1, d)
        nbrs = _sorted_unique(nbrs, d)
        boundary = nbrs[~_contains(interior, nbrs)]
        if target_fn is None:
            target = np.zeros(len(boundary), dtype=bool)
        else:
            target = np.asarray(target_fn(boundary), dtype=bool)
        for arr in (interior, boundary, target):
            arr.setflags(write=False)
        return cls(interior, boundary, target)

    @property
    def d(self) -> int:
        return self.interior.shape[1]

    @property
    def boundary_target(self) -> np.ndarray:
        return self.boundary[self.target]

    @property
    def boundary_rest(self) -> np.ndarray:
        return self.boundary[~self.target]

    def contains(self, sites) -> np.ndarray:
        return _contains(self.interior, np.atleast_2d(sites))

    def index_of(self, site) -> int:
        site = np.asarray(site, dtype=np.int64)
        hit = np.nonzero(np.all(self.interior == site, axis=1))[0]
        if len(hit) == 0:
            raise GeometryError(f"site {tuple(site)} is not interior")
        return int(hit[0])

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """(n, 2d) indices of neighbours: interior in [0, n), boundary n + j."""
        n, d = self.interior.shape
        nbrs = (self.interior[:, None, :] + unit_steps(d)[None, :, :]).reshape(-1, d)
        all_sites = np.concatenate([self.interior, self.boundary])
        order = np.lexsort(all_sites.T[::-1])
        dt = np.dtype([(f"f{i}", np.int64) for i in range(d)])
        sorted_sites = np.ascontiguousarray(all_sites[order])
        pos = np.searchsorted(sorted_sites.view(dt).ravel(),
                              np.ascontiguousarray(nbrs).view(dt).ravel())
        table = order[pos].reshape(n, 2 * d)
        table.setflags(write=False)
        return table


def _bounding_ranges(rotation: Rotation, lows, highs, offset) -> list:
    d = rotation.d
    corners = np.array(list(itertools.product(*zip(lows, highs)))) + offset
    img = corners @ rotation.matrix.T
    lo = np.floor(img.min(axis=0) - 1e-9).astype(int)
    hi = np.ceil(img.max(axis=0) + 1e-9).astype(int)
    return [np.arange(lo[i], hi[i] + 1) for i in range(d)]


def _in_local_box(y, lows, highs, low_closed, high_closed, tol=MEMBERSHIP_TOL):
    ok = np.ones(len(y), dtype=bool)
    for i in range(y.shape[1]):
        lo_ok = y[:, i] >= lows[i] - tol if low_closed[i] else y[:, i] > lows[i] + tol
        hi_ok = y[:, i] <= highs[i] + tol if high_closed[i] else y[:, i] < highs[i] - tol
        ok &= lo_ok & hi_ok
    return ok


def realize(rotation: Rotation, lows, highs, low_closed=None, high_closed=None,
            offset=None) -> np.ndarray:
    """Lattice sites x with R^T x - offset in the given (half-)open rectangle."""
    d = rotation.d
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    offset = np.zeros(d) if offset is None else np.asarray(offset, dtype=float)
    low_closed = [False] * d if low_closed is None else list(low_closed)
    high_closed = [False] * d if high_closed is None else list(high_closed)
    ranges = _bounding_ranges(rotation, lows, highs, offset)
    grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, d)
    y = grid @ rotation.matrix - offset
    keep = _in_local_box(y, lows, highs, low_closed, high_closed)
    return _sorted_unique(grid[keep], d)


@dataclass(frozen=True, eq=False)
class LatticeBox(Region):
    spec: BoxSpec = None

    @property
    def boundary_plus(self) -> np.ndarray:
        return self.boundary_target

    @property
    def boundary_other(self) -> np.ndarray:
        return self.boundary_rest

    def contains_origin(self) -> bool:
        return bool(self.contains(np.zeros(self.d, dtype=np.int64))[0])


def build_box(spec: BoxSpec, require_origin: bool = False) -> LatticeBox:
    """Realize a box specification; boundary_plus is the positive face."""
    d = spec.d
    lows = [-spec.neg_extent] + [-spec.transverse] * (d - 1)
    highs = [spec.pos_extent] + [spec.transverse] * (d - 1)
    interior = realize(spec.rotation, lows, highs)
    if len(interior) == 0:
        raise GeometryError("box specification realizes an empty interior")
    m = spec.rotation.matrix

    def plus(sites):
        y = sites @ m
        ok = y[:, 0] >= spec.pos_extent - MEMBERSHIP_TOL
        if d > 1:
            ok &= np.all(np.abs(y[:, 1:]) <= spec.transverse + MEMBERSHIP_TOL, axis=1)
        return ok

    r = Region.from_interior(interior, plus)
    box = LatticeBox(r.interior, r.boundary, r.target, spec)
    if require_origin and not box.contains_origin():
        raise GeometryError("origin is not an interior site of the box")
    return box


class SlabExit(str, Enum):
    INSIDE = "inside"
    EXITED_FRONT = "exited_front"
    EXITED_BACK = "exited_back"


@dataclass(frozen=True)
class Slab:
    """{x : -b L < x.l < L}."""

    direction: Direction
    b: float
    L: float

    def __post_init__(self):
        if not (self.b > 0 and self.L > 0):
            raise GeometryError("slab needs b > 0 and L > 0")


def slab_membership(slab: Slab, x) -> SlabExit:
    p = float(np.dot(slab.direction.vector, np.asarray(x, dtype=float)))
    if p >= slab.L:
        return SlabExit.EXITED_FRONT
    if p <= -slab.b * slab.L:
        return SlabExit.EXITED_BACK
    return SlabExit.INSIDE


@dataclass(frozen=True, eq=False)
class RenormBoxes:
    w: tuple
    beta: float
    L: float
    rotation: Rotation
    b1: np.ndarray
    b2: Region

    @property
    def star_boundary(self) -> np.ndarray:
        return self.b2.boundary_target


def _b1_sites(rotation, w, L, width):
    d = rotation.d
    return realize(rotation, [0.0] + [0.0] * (d - 1), [L] + [width] * (d - 1),
                   low_closed=[True] * d, high_closed=[True] * d, offset=w)


def build_renorm_boxes(v_hat: Direction, beta: float, L: float, w=None,
                       rotation: Rotation | None = None) -> RenormBoxes:
    """B1 = R(w + [0,L] x [0,L^b]^(d-1)), B2 = R(w + (-dL^b, L] x (-dL^b, (d+1)L^b)^(d-1)).

    The star boundary is the part of the outer boundary of B2 lying in
    B1(w + L e1).
    """
    if not 0 < beta < 1:
        raise GeometryError("beta must lie in (0, 1)")
    if L < 1:
        raise GeometryError("L must be at least 1")
    rot = rotation if rotation is not None else rotation_from_direction(v_hat)
    d = rot.d
    w = np.zeros(d) if w is None else np.asarray(w, dtype=float)
    s = L ** beta
    b1 = _b1_sites(rot, w, L, s)
    if len(b1) == 0:
        raise GeometryError("B1 is empty")
    b2_int = realize(rot, [-d * s] * d, [L] + [(d + 1) * s] * (d - 1),
                     low_closed=[False] * d, high_closed=[True] + [False] * (d - 1),
                     offset=w)
    shifted = w.copy()
    shifted[0] += L
    m = rot.matrix

    def star(sites):
        y = sites @ m - shifted
        return _in_local_box(y, [0.0] * d, [L] + [s] * (d - 1), [True] * d, [True] * d)

    b2 = Region.from_interior(b2_int, star)
    b1.setflags(write=False)
    return RenormBoxes(tuple(float(x) for x in w), beta, L, rot, b1, b2)


@dataclass(frozen=True, eq=False)
class TileBoxes:
    w: tuple
    L: float
    beta0: float
    beta: float
    eta: float
    chi: float
    L0: float
    rotation: Rotation
    b1: np.ndarray
    b2: Region

    @property
    def plus_boundary(self) -> np.ndarray:
        return self.b2.boundary_target


def tile_parameters(beta0: float, beta: float, eta: float, L: float) -> tuple:
    """Return (chi, L0) with chi = beta0 + 1 - beta, L0 = (L - eta L^beta0) / floor(L^(1-chi))."""
    chi = beta0 + 1.0 - beta
    if not beta0 < chi <= 1.0:
        raise GeometryError(f"chi = {chi} outside (beta0, 1]")
    L0 = (L - eta * L ** beta0) / math.floor(L ** (1.0 - chi))
    return chi, L0


def build_tile_boxes(v_hat: Direction, beta0: float, beta: float, eta: float, L: float,
                     w=None, rotation: Rotation | None = None) -> TileBoxes:
    if not (0.5 < beta0 <= beta < 1):
        raise GeometryError("need 1/2 < beta0 <= beta < 1")
    if not eta > 0:
        raise GeometryError("eta must be positive")
    chi, L0 = tile_parameters(beta0, beta, eta, L)
    if L0 < 1:
        raise GeometryError(f"scale too small: L0 = {L0:.4g} < 1")
    rot = rotation if rotation is not None else rotation_from_direction(v_hat)
    d = rot.d
    w = np.zeros(d) if w is None else np.asarray(w, dtype=float)
    s = L ** beta0
    b1 = _b1_sites(rot, w, L0, s)
    lows = [-d * s] + [-eta * s] * (d - 1)
    highs = [L0] + [(1 + eta) * s] * (d - 1)
    b2_int = realize(rot, lows, highs, low_closed=[False] * d,
                     high_closed=[True] + [False] * (d - 1), offset=w)
    m = rot.matrix

    def plus(sites):
        y = sites @ m - w
        ok = y[:, 0] > L0 + MEMBERSHIP_TOL
        for i in range(1, d):
            ok &= (y[:, i] >= lows[i] - MEMBERSHIP_TOL) & (y[:, i] <= highs[i] + MEMBERSHIP_TOL)
        return ok

    b2 = Region.from_interior(b2_int, plus)
    b1.setflags(write=False)
    return TileBoxes(tuple(float(x) for x in w), L, beta0, beta, eta, chi, L0, rot, b1, b2)
