"""Synthetic bifurcation geometries as tagged point clouds.

A shape is a union of straight cylinders (one parent, zero or two
children attached at the parent's distal end cap). Points are tagged with
one of four roles and carry a 9-value feature row: the offset vectors to
the nearest wall, inlet and outlet point.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

ROLE_INTERIOR = 0
ROLE_WALL = 1
ROLE_INLET = 2
ROLE_OUTLET = 3
ROLE_NAMES = ("interior", "wall", "inlet", "outlet")

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
_CHUNK = 512


class GeometryError(ValueError):
    """Raised for invalid geometry parameters or degenerate sampling."""


def quantize(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, returned as float64.

    Stored arrays go through this so that file round trips are bitwise.
    """
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def _orthonormal_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


@dataclass(frozen=True)
class Segment:
    """Straight centerline segment of a cylinder with constant radius."""

    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float
    parent: int | None = None

    @cached_property
    def axis(self) -> np.ndarray:
        d = np.subtract(self.end, self.start, dtype=np.float64)
        return d / np.linalg.norm(d)

    @cached_property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start, dtype=np.float64)))

    def local_coords(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Axial coordinate from ``start`` and radial distance to the axis line."""
        rel = np.atleast_2d(points) - np.asarray(self.start)
        s = rel @ self.axis
        radial = rel - s[:, None] * self.axis
        return s, np.sqrt((radial**2).sum(axis=1))

    def contains(self, points: np.ndarray, rtol: float = 0.0) -> np.ndarray:
        """Strict containment in the open cylinder (``rtol`` > 0 loosens it)."""
        s, r = self.local_coords(points)
        tol = rtol * max(self.radius, self.length)
        return (r < self.radius * (1.0 + rtol)) & (s > -tol) & (s < self.length + tol)

    def distance_to_axis(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance to the closed centerline segment."""
        s, r = self.local_coords(points)
        overshoot = np.where(s < 0.0, -s, np.where(s > self.length, s - self.length, 0.0))
        return np.sqrt(r**2 + overshoot**2)

    def to_json(self) -> dict:
        return {"start": list(self.start), "end": list(self.end),
                "radius": self.radius, "parent": self.parent}

    @classmethod
    def from_json(cls, d: dict) -> "Segment":
        return cls(tuple(d["start"]), tuple(d["end"]), float(d["radius"]), d.get("parent"))


def murray_split(parent_radius: float, asymmetry: float = 1.0) -> tuple[float, float]:
    """Child radii ``(r1, r2)`` with ``r2 = asymmetry * r1`` and r1^3 + r2^3 = R^3."""
    if parent_radius <= 0:
        raise GeometryError(f"parent_radius must be positive, got {parent_radius}")
    if not 0.0 < asymmetry <= 1.0:
        raise GeometryError(f"asymmetry must lie in (0, 1], got {asymmetry}")
    r1 = parent_radius / (1.0 + asymmetry**3) ** (1.0 / 3.0)
    return r1, asymmetry * r1


@dataclass(frozen=True)
class BifurcationParams:
    """Parameters of one synthetic bifurcation (SI units, angles in radians).

    ``child_lengths == (0, 0)`` disables the bifurcation and yields a straight
    tube along +z. ``murray=True`` marks radii produced by :func:`murray_split`
    and is checked on validation.
    """

    parent_radius: float
    parent_length: float
    child_radii: tuple[float, float] = (0.0, 0.0)
    child_lengths: tuple[float, float] = (0.0, 0.0)
    child_angles: tuple[float, float] = (0.5, 0.5)
    seed: int = 0
    n_interior: int = 2048
    n_wall: int = 1024
    n_cap: int = 64
    murray: bool = False

    @classmethod
    def with_murray(cls, parent_radius: float, asymmetry: float = 1.0, **kwargs) -> "BifurcationParams":
        radii = murray_split(parent_radius, asymmetry)
        return cls(parent_radius=parent_radius, child_radii=radii, murray=True, **kwargs)

    @classmethod
    def straight(cls, radius: float, length: float, **kwargs) -> "BifurcationParams":
        return cls(parent_radius=radius, parent_length=length, **kwargs)

    @property
    def is_straight(self) -> bool:
        return self.child_lengths[0] == 0 and self.child_lengths[1] == 0

    def validate(self) -> None:
        if self.parent_radius <= 0 or self.parent_length <= 0:
            raise GeometryError("parent radius and length must be strictly positive")
        if min(self.n_interior, self.n_wall, self.n_cap) < 1:
            raise GeometryError("point counts must be at least 1")
        if self.is_straight:
            return
        if min(self.child_radii) <= 0 or min(self.child_lengths) <= 0:
            raise GeometryError("child radii and lengths must be strictly positive")
        for a in self.child_angles:
            if not 0.0 < a < math.pi / 2:
                raise GeometryError(f"child angle {a} outside (0, pi/2)")
        if self.murray:
            lhs = self.parent_radius**3
            rhs = self.child_radii[0] ** 3 + self.child_radii[1] ** 3
            if abs(lhs - rhs) > 1e-12 * lhs:
                raise GeometryError("child radii violate Murray's law")

    def segments(self) -> tuple[Segment, ...]:
        junction = (0.0, 0.0, float(self.parent_length))
        parent = Segment((0.0, 0.0, 0.0), junction, float(self.parent_radius))
        if self.is_straight:
            return (parent,)
        out = [parent]
        for sign, radius, length, angle in zip((1.0, -1.0), self.child_radii,
                                               self.child_lengths, self.child_angles):
            d = np.array([sign * math.sin(angle), 0.0, math.cos(angle)])
            end = tuple(float(v) for v in np.asarray(junction) + length * d)
            out.append(Segment(junction, end, float(radius), parent=0))
        return tuple(out)

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("child_radii", "child_lengths", "child_angles"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BifurcationParams":
        d = dict(d)
        for key in ("child_radii", "child_lengths", "child_angles"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Shape:
    """Immutable tagged point cloud of a vessel lumen."""

    id: str
    points: np.ndarray
    roles: np.ndarray
    features: np.ndarray
    centerline: tuple[Segment, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.points, self.roles, self.features):
            arr.setflags(write=False)
        if self.points.shape != (len(self.roles), 3):
            raise GeometryError("points must be N x 3 and aligned with roles")
        if len(self.features) != len(self.points):
            raise GeometryError("features must be aligned with points")

    @classmethod
    def from_arrays(cls, shape_id: str, points, roles, centerline=(), meta=None,
                    feature_mode: str = "offset") -> "Shape":
        points = np.array(points, dtype=np.float64)
        roles = np.array(roles, dtype=np.uint8)
        feats = compute_features(points, roles, mode=feature_mode)
        return cls(shape_id, points, roles, feats, tuple(centerline), dict(meta or {}))

    def __len__(self) -> int:
        return len(self.points)

    def mask(self, role: int) -> np.ndarray:
        return self.roles == role

    def indices(self, *roles: int) -> np.ndarray:
        return np.flatnonzero(np.isin(self.roles, roles))

    @cached_property
    def graph_indices(self) -> np.ndarray:
        """Interior and wall points: the support of the differential operators."""
        return self.indices(ROLE_INTERIOR, ROLE_WALL)

    def transformed(self, rotation=None, translation=None, shape_id: str | None = None) -> "Shape":
        """Rigidly moved copy; features are recomputed from the moved points."""
        rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        shift = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)

        def move(p):
            return np.asarray(p, dtype=np.float64) @ rot.T + shift

        segs = tuple(Segment(tuple(move(s.start)), tuple(move(s.end)), s.radius, s.parent)
                     for s in self.centerline)
        return Shape.from_arrays(shape_id or self.id, move(self.points), self.roles, segs, self.meta)


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``a`` (M x 3) and ``b`` (K x 3)."""
    d2 = (a[:, None, 0] - b[None, :, 0]) ** 2
    for c in range(1, a.shape[1]):
        d2 += (a[:, None, c] - b[None, :, c]) ** 2
    return d2


def _nearest_offsets(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Offset from each point to its nearest target; ties go to the lowest target index."""
    out = np.empty_like(points)
    for lo in range(0, len(points), _CHUNK):
        block = points[lo:lo + _CHUNK]
        nearest = np.argmin(pairwise_sqdist(block, targets), axis=1)
        out[lo:lo + _CHUNK] = targets[nearest] - block
    return out


def compute_features(shape_or_points, roles=None, mode: str = "offset") -> np.ndarray:
    """Per-point offsets to the nearest wall, inlet and outlet point.

    Returns an N x 9 matrix ``[wall* - p, inlet* - p, outlet* - p]``. With
    ``mode="distance"`` the three offset norms are returned instead (N x 3).
    """
    if roles is None:
        points, roles = shape_or_points.points, shape_or_points.roles
    else:
        points = shape_or_points
    points = np.asarray(points, dtype=np.float64)
    roles = np.asarray(roles)
    blocks = []
    for role in (ROLE_WALL, ROLE_INLET, ROLE_OUTLET):
        targets = points[roles == role]
        if len(targets) == 0:
            raise GeometryError(f"shape has no {ROLE_NAMES[role]} points")
        blocks.append(_nearest_offsets(points, targets))
    feats = np.concatenate(blocks, axis=1)
    if mode == "offset":
        return feats
    if mode == "distance":
        return np.sqrt((feats.reshape(-1, 3, 3) ** 2).sum(axis=2))
    raise ValueError(f"unknown feature mode {mode!r}")


def _sunflower_disk(center, axis, radius, n, phase):
    e1, e2 = _orthonormal_frame(np.asarray(axis, dtype=np.float64))
    i = np.arange(n)
    r = radius * np.sqrt((i + 0.5) / n)
    phi = i * _GOLDEN_ANGLE + phase
    return np.asarray(center) + r[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)


def _inside_any(points, segments, skip=None):
    inside = np.zeros(len(points), dtype=bool)
    for j, seg in enumerate(segments):
        if j != skip:
            inside |= seg.contains(points)
    return inside


def _sample_interior(segments, n, rng, max_attempts):
    lo = np.min([np.minimum(s.start, s.end) - s.radius for s in segments], axis=0)
    hi = np.max([np.maximum(s.start, s.end) + s.radius for s in segments], axis=0)
    batch = max(256, 2 * n)
    accepted = []
    count = 0
    for _ in range(max_attempts):
        cand = quantize(rng.uniform(lo, hi, size=(batch, 3)))
        keep = cand[_inside_any(cand, segments)]
        accepted.append(keep)
        count += len(keep)
        if count >= n:
            return np.concatenate(accepted)[:n]
    raise GeometryError(
        f"interior rejection sampling produced {count}/{n} points after "
        f"{max_attempts} batches; parameters are likely degenerate")


def _wall_surfaces(segments):
    """(segment index, kind, area) for every surface patch that may carry wall points."""
    surfaces = [(j, "lateral", 2 * math.pi * s.radius * s.length) for j, s in enumerate(segments)]
    if len(segments) > 1:
        surfaces.append((0, "end", math.pi * segments[0].radius**2))
        for j in range(1, len(segments)):
            surfaces.append((j, "start", math.pi * segments[j].radius**2))
    return surfaces


def _sample_wall(segments, n, rng, max_attempts):
    surfaces = _wall_surfaces(segments)
    areas = np.array([a for _, _, a in surfaces])
    probs = areas / areas.sum()
    batch = max(256, 2 * n)
    accepted = []
    count = 0
    for _ in range(max_attempts):
        which = rng.choice(len(surfaces), size=batch, p=probs)
        u = rng.random((batch, 2))
        cand = np.empty((batch, 3))
        for si, (j, kind, _) in enumerate(surfaces):
            sel = which == si
            if not sel.any():
                continue
            seg = segments[j]
            e1, e2 = _orthonormal_frame(seg.axis)
            phi = 2 * math.pi * u[sel, 1]
            if kind == "lateral":
                s = seg.length * u[sel, 0]
                r = np.full(sel.sum(), seg.radius)
            else:
                s = np.full(sel.sum(), seg.length if kind == "end" else 0.0)
                r = seg.radius * np.sqrt(u[sel, 0])
            cand[sel] = (np.asarray(seg.start) + s[:, None] * seg.axis
                         + r[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2))
        cand = quantize(cand)
        keep = np.ones(batch, dtype=bool)
        for si, (j, _, _) in enumerate(surfaces):
            sel = which == si
            keep[sel] = ~_inside_any(cand[sel], segments, skip=j)
        accepted.append(cand[keep])
        count += int(keep.sum())
        if count >= n:
            return np.concatenate(accepted)[:n]
    raise GeometryError(f"wall sampling produced {count}/{n} points after {max_attempts} batches")


def generate_bifurcation(params: BifurcationParams, shape_id: str | None = None,
                         max_attempts: int = 200) -> Shape:
    """Sample a tagged point cloud for ``params``; deterministic in ``params.seed``.

    Interior points are drawn uniformly by rejection inside the cylinder union,
    wall points on the union's boundary (lateral surfaces plus the uncovered
    parts of the junction caps), and inlet/outlet points on a sunflower lattice
    of each end disk.
    """
    params.validate()
    segments = params.segments()
    rng = np.random.default_rng(params.seed)
    interior = _sample_interior(segments, params.n_interior, rng, max_attempts)
    wall = _sample_wall(segments, params.n_wall, rng, max_attempts)
    parent = segments[0]
    caps = [quantize(_sunflower_disk(parent.start, parent.axis, parent.radius, params.n_cap,
                                     rng.uniform(0, 2 * math.pi)))]
    outlets = segments[1:] if len(segments) > 1 else segments
    for seg in outlets:
        caps.append(quantize(_sunflower_disk(seg.end, seg.axis, seg.radius, params.n_cap,
                                             rng.uniform(0, 2 * math.pi))))
    points = np.concatenate([interior, wall] + caps)
    roles = np.concatenate([
        np.full(len(interior), ROLE_INTERIOR),
        np.full(len(wall), ROLE_WALL),
        np.full(params.n_cap, ROLE_INLET),
        np.full(params.n_cap * len(outlets), ROLE_OUTLET),
    ]).astype(np.uint8)
    feats = quantize(compute_features(points, roles))
    sid = shape_id if shape_id is not None else f"bif-{params.seed}"
    return Shape(sid, points, roles, feats, segments, {"params": params.to_json()})


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling ranges for a family of synthetic bifurcations."""

    parent_radius: tuple[float, float] = (1.5e-3, 2.5e-3)
    parent_length: tuple[float, float] = (6e-3, 1.0e-2)
    asymmetry: tuple[float, float] = (0.6, 1.0)
    child_length_ratio: tuple[float, float] = (2.0, 4.0)
    child_angle: tuple[float, float] = (0.25, 1.1)

    def validate(self) -> None:
        for name, (lo, hi) in asdict(self).items():
            if not lo <= hi:
                raise GeometryError(f"range {name} has lo > hi")
            if lo <= 0:
                raise GeometryError(f"range {name} must be positive")
        if self.asymmetry[1] > 1.0:
            raise GeometryError("asymmetry must not exceed 1")
        if self.child_angle[1] >= math.pi / 2:
            raise GeometryError("child angles must stay below pi/2")

    @classmethod
    def from_json(cls, d: dict) -> "ParamRanges":
        return cls(**{k: tuple(v) for k, v in d.items()})


def sample_params(rng: np.random.Generator, ranges: ParamRanges = ParamRanges(),
                  n_interior: int = 2048, n_wall: int = 1024, n_cap: int = 64) -> BifurcationParams:
    """Draw one Murray-compatible bifurcation from ``ranges``."""
    pr = float(rng.uniform(*ranges.parent_radius))
    pl = float(rng.uniform(*ranges.parent_length))
    asym = float(rng.uniform(*ranges.asymmetry))
    lengths = tuple(float(pr * rng.uniform(*ranges.child_length_ratio)) for _ in range(2))
    angles = tuple(float(rng.uniform(*ranges.child_angle)) for _ in range(2))
    seed = int(rng.integers(0, 2**31 - 1))
    return BifurcationParams.with_murray(
        pr, asym, parent_length=pl, child_lengths=lengths, child_angles=angles,
        seed=seed, n_interior=n_interior, n_wall=n_wall, n_cap=n_cap)


def _distances_to(vectors: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.sqrt(((vectors - x) ** 2).sum(axis=1))


def farthest_point_sampling(vectors, k: int, preselected: Sequence[int] = ()) -> list[int]:
    """Greedy max-min selection of ``k`` rows of ``vectors``.

    Rows in ``preselected`` seed the distance field and are never returned.
    Without a seed the first pick is the row farthest from the centroid.
    Ties go to the lowest index.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    pre = list(dict.fromkeys(int(i) for i in preselected))
    if k < 0 or k > len(X) - len(pre):
        raise ValueError(f"cannot select {k} rows from {len(X) - len(pre)} available")
    taken = np.zeros(len(X), dtype=bool)
    selected: list[int] = []
    if k == 0:
        return selected
    if pre:
        taken[pre] = True
        mind = np.full(len(X), np.inf)
        for i in pre:
            mind = np.minimum(mind, _distances_to(X, X[i]))
    else:
        first = int(np.argmax(_distances_to(X, X.mean(axis=0))))
        selected.append(first)
        taken[first] = True
        mind = _distances_to(X, X[first])
    while len(selected) < k:
        j = int(np.argmax(np.where(taken, -np.inf, mind)))
        selected.append(j)
        taken[j] = True
        mind = np.minimum(mind, _distances_to(X, X[j]))
    return selected
