"""Analytic steady-flow labeler used in place of a CFD solver.

Every segment carries fully developed Poiseuille flow. Child mean speeds
follow from mass conservation with flow fractions proportional to r^3.
Near the junction the parent and child profiles are blended with a cosine
ramp along the parent axis over one parent radius.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import ROLE_WALL, Segment, Shape


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class FluidConstants:
    density: float = 1060.0
    viscosity: float = 3.5e-3

    def __post_init__(self):
        if not (self.density > 0 and self.viscosity > 0):
            raise ValueError("density and viscosity must be strictly positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Per-point velocity (m/s), index-aligned with a shape."""

    values: np.ndarray
    shape_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"velocity values must be N x 3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("velocity field has non-finite entries")
        v.setflags(write=False)

    def __len__(self) -> int:
        return len(self.values)


def as_values(field_or_array) -> np.ndarray:
    if isinstance(field_or_array, VelocityField):
        return field_or_array.values
    return np.asarray(field_or_array, dtype=np.float64)


def _profile(points: np.ndarray, seg: Segment, mean_speed: float, clamp: bool) -> np.ndarray:
    _, r = seg.local_coords(points)
    shape = 1.0 - (r / seg.radius) ** 2
    if clamp:
        shape = np.maximum(shape, 0.0)
    return (2.0 * mean_speed * shape)[:, None] * seg.axis


def poiseuille_velocity(point, segment: Segment, mean_speed: float) -> np.ndarray:
    """Parabolic velocity ``2 V (1 - r^2/R^2) t`` at a single point."""
    point = np.asarray(point, dtype=np.float64).reshape(1, 3)
    _, r = segment.local_coords(point)
    if r[0] > segment.radius:
        raise OracleError(f"point at radial distance {r[0]:.6g} lies outside radius {segment.radius:.6g}")
    return _profile(point, segment, mean_speed, clamp=False)[0]


def segment_mean_speeds(segments, inflow: float) -> list[float]:
    """Mean speed per segment given the parent's mean inflow speed."""
    parent = segments[0]
    children = segments[1:]
    if not children:
        return [inflow]
    total = sum(c.radius**3 for c in children)
    speeds = [inflow]
    for c in children:
        frac = c.radius**3 / total
        speeds.append(inflow * parent.radius**2 * frac / c.radius**2)
    return speeds


def _junction_weight(s: np.ndarray, length: float, window: float) -> np.ndarray:
    """1 upstream of the blend window, 0 past the parent end, cosine ramp between."""
    t = np.clip((s - (length - window)) / window, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(math.pi * t))


def label_shape(shape: Shape, constants: FluidConstants = FluidConstants(), inflow: float = 0.1,
                noise_sigma: float = 0.0, noise_seed: int | None = None) -> VelocityField:
    """Ground-truth velocity for every point of ``shape``.

    Wall points get exactly zero. ``noise_sigma`` > 0 adds zero-mean Gaussian
    noise to non-wall points to mimic solver discretization error.
    """
    if inflow <= 0:
        raise OracleError("inflow mean speed must be positive")
    segs = shape.centerline
    if not segs:
        raise OracleError(f"shape {shape.id!r} has no centerline")
    pts = shape.points
    flowing = shape.roles != ROLE_WALL
    inside = np.zeros(len(pts), dtype=bool)
    for seg in segs:
        inside |= seg.contains(pts, rtol=1e-6)
    stray = np.flatnonzero(flowing & ~inside)
    if len(stray):
        raise OracleError(f"{len(stray)} points of shape {shape.id!r} lie in no segment (first index {stray[0]})")

    speeds = segment_mean_speeds(segs, inflow)
    parent = segs[0]
    if len(segs) == 1:
        u = _profile(pts, parent, speeds[0], clamp=True)
    else:
        s, _ = parent.local_coords(pts)
        w = _junction_weight(s, parent.length, parent.radius)
        # governing child: smallest normalized radial distance, lowest index on ties
        rel = np.stack([seg.local_coords(pts)[1] / seg.radius for seg in segs[1:]], axis=1)
        child = np.argmin(rel, axis=1)
        u_child = np.zeros_like(pts)
        for c, seg in enumerate(segs[1:]):
            sel = child == c
            u_child[sel] = _profile(pts[sel], seg, speeds[c + 1], clamp=True)
        u_parent = _profile(pts, parent, speeds[0], clamp=True)
        u = w[:, None] * u_parent + (1.0 - w)[:, None] * u_child
    if noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        u = u + noise_sigma * rng.standard_normal(u.shape)
    u[~flowing] = 0.0
    meta = {"shape_id": shape.id, "constants": constants.to_json(), "inflow": inflow}
    if noise_sigma > 0:
        meta["noise_sigma"] = noise_sigma
    return VelocityField(u, shape.id, meta)


@dataclass
class AnalyticOracle:
    """Callable labeler that counts how often it is invoked."""

    constants: FluidConstants = FluidConstants()
    inflow: float = 0.1
    noise_sigma: float = 0.0
    calls: int = 0

    def __call__(self, shape: Shape) -> VelocityField:
        self.calls += 1
        seed = None
        if self.noise_sigma > 0:
            seed = zlib.crc32(shape.id.encode())
        return label_shape(shape, self.constants, self.inflow, self.noise_sigma, seed)
