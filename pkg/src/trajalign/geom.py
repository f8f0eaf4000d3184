"""Planar geometry on normalized coordinates.

Everything here works in the unit square produced by :func:`normalize_coords`;
distances are Euclidean in those units. A trajectory footprint is the
piecewise-linear polyline through its waypoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyGraph, InvalidTrajectory, OutOfBounds

# distances below this are reported as exactly zero
ZERO_TOL = 1e-12
# distances this close count as ties, broken by smallest index
TIE_TOL = 1e-12


@dataclass(frozen=True)
class GeoBounds:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def __post_init__(self):
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise ValueError(f"degenerate bounds: {self}")

    @classmethod
    def unit(cls) -> "GeoBounds":
        return cls(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class Waypoint:
    location: tuple[float, float]
    time: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered GPS samples; ``coords`` is (L, 2) in [0,1]^2, ``times`` is (L,)."""

    id: str
    coords: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if len(coords) != len(times):
            raise InvalidTrajectory(f"{self.id}: {len(coords)} coords vs {len(times)} times")
        if len(coords) < 2:
            raise InvalidTrajectory(f"{self.id}: needs at least 2 waypoints")
        if not np.all(np.isfinite(coords)) or not np.all(np.isfinite(times)):
            raise InvalidTrajectory(f"{self.id}: non-finite waypoint")
        if coords.min() < 0.0 or coords.max() > 1.0:
            raise InvalidTrajectory(f"{self.id}: coordinates outside [0,1]^2")
        if np.any(np.diff(times) < 0):
            raise InvalidTrajectory(f"{self.id}: timestamps decrease")
        coords.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "times", times)

    @classmethod
    def from_waypoints(cls, traj_id: str, waypoints: Iterable[Waypoint]) -> "Trajectory":
        wps = list(waypoints)
        return cls(traj_id, [w.location for w in wps], [w.time for w in wps])

    def __len__(self) -> int:
        return len(self.times)

    @property
    def waypoints(self) -> list[Waypoint]:
        return [Waypoint((float(x), float(y)), float(t)) for (x, y), t in zip(self.coords, self.times)]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.times, other.times)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Footprint:
    starts: np.ndarray  # (L-1, 2)
    ends: np.ndarray  # (L-1, 2)
    cumulative_length: np.ndarray = field(repr=False)  # (L,), starts at 0

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "Footprint":
        return cls.from_points(traj.coords)

    @classmethod
    def from_points(cls, points) -> "Footprint":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise InvalidTrajectory("a footprint needs at least 2 points")
        seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return cls(pts[:-1].copy(), pts[1:].copy(), np.concatenate([[0.0], np.cumsum(seg_len)]))

    @property
    def segments(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.starts, self.ends))

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def length(self) -> float:
        return float(self.cumulative_length[-1])


@dataclass(frozen=True)
class QueryPoint:
    svi_id: str
    location: tuple[float, float]
    segment_index: int
    lam: float
    est_time: float | None


@dataclass(frozen=True)
class QuerySet:
    trajectory_id: str
    points: tuple[QueryPoint, ...]

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


@dataclass(frozen=True)
class RoadSegment:
    segment_id: int
    start: tuple[float, float]
    end: tuple[float, float]


def normalize_coords(lat: float, lon: float, bounds: GeoBounds) -> tuple[float, float]:
    if not (bounds.min_lat <= lat <= bounds.max_lat and bounds.min_lon <= lon <= bounds.max_lon):
        raise OutOfBounds(f"({lat}, {lon}) outside {bounds}")
    return (
        (lat - bounds.min_lat) / (bounds.max_lat - bounds.min_lat),
        (lon - bounds.min_lon) / (bounds.max_lon - bounds.min_lon),
    )


def denormalize_coords(x: float, y: float, bounds: GeoBounds) -> tuple[float, float]:
    return (
        bounds.min_lat + x * (bounds.max_lat - bounds.min_lat),
        bounds.min_lon + y * (bounds.max_lon - bounds.min_lon),
    )


def segment_projection(points, starts, ends) -> tuple[np.ndarray, np.ndarray]:
    """Clamped projection of every point onto every segment.

    Returns ``(dist, lam)``, both shaped (n_points, n_segments). Zero-length
    segments project with lam = 0.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 1, 2)
    a = np.asarray(starts, dtype=np.float64).reshape(1, -1, 2)
    b = np.asarray(ends, dtype=np.float64).reshape(1, -1, 2)
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    num = np.sum((p - a) * ab, axis=-1)
    safe = np.where(denom > 0, denom, 1.0)
    lam = np.where(denom > 0, np.clip(num / safe, 0.0, 1.0), 0.0)
    foot = a + lam[..., None] * ab
    dist = np.linalg.norm(p - foot, axis=-1)
    dist = np.where(dist < ZERO_TOL, 0.0, dist)
    return dist, lam


def first_min(dist: np.ndarray) -> np.ndarray:
    """Index of the first entry within TIE_TOL of each row's minimum."""
    dist = np.atleast_2d(dist)
    return np.argmax(dist <= dist.min(axis=1, keepdims=True) + TIE_TOL, axis=1)


def footprint_distance(x, fp: Footprint) -> float:
    dist, _ = segment_projection(x, fp.starts, fp.ends)
    return float(dist[0].min())


def project_onto_footprint(x, fp: Footprint) -> tuple[int, float]:
    dist, lam = segment_projection(x, fp.starts, fp.ends)
    k = int(first_min(dist)[0])
    return k, float(lam[0, k])


def point_at(fp: Footprint, segment_index: int, lam: float) -> np.ndarray:
    a, b = fp.starts[segment_index], fp.ends[segment_index]
    return a + lam * (b - a)


def synthetic_query_time(traj: Trajectory, segment_index: int, lam: float) -> float:
    """Interpolated traversal time at fraction ``lam`` of segment ``segment_index``."""
    if not 0 <= segment_index < len(traj) - 1:
        raise IndexError(f"segment {segment_index} out of range for {traj.id}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    ta, tb = float(traj.times[segment_index]), float(traj.times[segment_index + 1])
    t = (1.0 - lam) * ta + lam * tb
    # rounding can step just outside [ta, tb]
    return min(max(t, ta), tb)


def build_query_set(
    traj: Trajectory,
    svi_locations: Sequence[tuple[str, Sequence[float]]],
    epsilon: float,
) -> QuerySet:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not svi_locations:
        return QuerySet(traj.id, ())
    fp = Footprint.from_trajectory(traj)
    ids = [s for s, _ in svi_locations]
    locs = np.asarray([loc for _, loc in svi_locations], dtype=np.float64).reshape(-1, 2)
    dist, lam = segment_projection(locs, fp.starts, fp.ends)
    best = first_min(dist)
    rows = np.arange(len(locs))
    dmin = dist[rows, best]
    points = []
    for i in np.flatnonzero(dmin <= epsilon):
        k = int(best[i])
        lam_i = float(lam[i, k])
        points.append(
            QueryPoint(
                svi_id=ids[i],
                location=(float(locs[i, 0]), float(locs[i, 1])),
                segment_index=k,
                lam=lam_i,
                est_time=synthetic_query_time(traj, k, lam_i),
            )
        )
    return QuerySet(traj.id, tuple(points))


def snap_to_nearest_segment(x, road_graph: Sequence[RoadSegment]) -> tuple[int, tuple[float, float]]:
    if len(road_graph) == 0:
        raise EmptyGraph("road graph has no segments")
    order = sorted(road_graph, key=lambda s: s.segment_id)
    starts = np.array([s.start for s in order], dtype=np.float64)
    ends = np.array([s.end for s in order], dtype=np.float64)
    dist, lam = segment_projection(x, starts, ends)
    k = int(first_min(dist)[0])
    foot = starts[k] + lam[0, k] * (ends[k] - starts[k])
    return order[k].segment_id, (float(foot[0]), float(foot[1]))


def snap_many(points, road_graph: Sequence[RoadSegment]) -> np.ndarray:
    """Vectorized :func:`snap_to_nearest_segment` returning segment ids only."""
    if len(road_graph) == 0:
        raise EmptyGraph("road graph has no segments")
    order = sorted(road_graph, key=lambda s: s.segment_id)
    starts = np.array([s.start for s in order], dtype=np.float64)
    ends = np.array([s.end for s in order], dtype=np.float64)
    dist, _ = segment_projection(points, starts, ends)
    ids = np.array([s.segment_id for s in order])
    return ids[first_min(dist)]
