"""In-memory multimodal dataset: trajectories, street-view observations, labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import torch

from .geom import QueryPoint, QuerySet, RoadSegment, Trajectory, build_query_set, snap_many

TASKS = ("speed", "popularity", "aoi", "hbe")
TASK_TYPES = {"speed": "regression", "hbe": "regression", "popularity": "classification", "aoi": "distribution"}


@dataclass(eq=False)
class GeoDataset:
    trajectories: list[Trajectory]
    svi_ids: list[str]
    svi_locs: np.ndarray  # (N, 2) normalized
    images: torch.Tensor  # (N, *backbone input shape): pixels or feature vectors
    epsilon: float
    road_graph: list[RoadSegment] | None = None
    labels: dict[str, dict[str, object]] = field(default_factory=dict)

    def __post_init__(self):
        self.svi_locs = np.asarray(self.svi_locs, dtype=np.float64).reshape(-1, 2)
        if len(self.svi_ids) != len(self.svi_locs) or len(self.svi_ids) != len(self.images):
            raise ValueError("svi ids, locations and images must have equal length")
        if len(set(self.svi_ids)) != len(self.svi_ids):
            raise ValueError("duplicate svi ids")

    @cached_property
    def svi_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.svi_ids)}

    @cached_property
    def traj_index(self) -> dict[str, int]:
        return {t.id: i for i, t in enumerate(self.trajectories)}

    @cached_property
    def query_sets(self) -> list[QuerySet]:
        svis = list(zip(self.svi_ids, self.svi_locs))
        return [build_query_set(t, svis, self.epsilon) for t in self.trajectories]

    @cached_property
    def intersecting(self) -> dict[str, list[tuple[int, QueryPoint]]]:
        """svi_id -> [(trajectory index, query point)] for every trajectory passing it."""
        out: dict[str, list[tuple[int, QueryPoint]]] = {s: [] for s in self.svi_ids}
        for ti, qs in enumerate(self.query_sets):
            for qp in qs:
                out[qp.svi_id].append((ti, qp))
        return out

    @property
    def eligible_trajectories(self) -> list[int]:
        return [i for i, qs in enumerate(self.query_sets) if len(qs)]

    def svi_location(self, svi_id: str) -> np.ndarray:
        return self.svi_locs[self.svi_index[svi_id]]

    def image(self, svi_id: str) -> torch.Tensor:
        return self.images[self.svi_index[svi_id]]

    @cached_property
    def svi_road_segment(self) -> np.ndarray | None:
        if not self.road_graph:
            return None
        return snap_many(self.svi_locs, self.road_graph)

    @cached_property
    def _waypoint_segments(self) -> dict[int, np.ndarray]:
        return {}

    def waypoint_road_segments(self, traj_index: int) -> np.ndarray:
        cache = self._waypoint_segments
        if traj_index not in cache:
            cache[traj_index] = snap_many(self.trajectories[traj_index].coords, self.road_graph)
        return cache[traj_index]

    def segment_membership(self, traj_index: int, kept_indices: np.ndarray, qp: QueryPoint) -> np.ndarray:
        """Which retained waypoints lie on the query's road segment.

        Waypoints snap to their nearest road segment (ties to the smallest id).
        Without a road graph, or when no retained waypoint snaps to the segment,
        the retained waypoints bracketing the query's footprint segment are used.
        """
        kept = np.asarray(kept_indices)
        if self.svi_road_segment is not None:
            seg = self.svi_road_segment[self.svi_index[qp.svi_id]]
            member = self.waypoint_road_segments(traj_index)[kept] == seg
            if member.any():
                return member
        member = np.zeros(len(kept), dtype=bool)
        before = np.flatnonzero(kept <= qp.segment_index)
        after = np.flatnonzero(kept >= qp.segment_index + 1)
        if len(before):
            member[before[-1]] = True
        if len(after):
            member[after[0]] = True
        return member

    def without_svis(self, drop: Sequence[str]) -> "GeoDataset":
        drop = set(drop)
        keep = [i for i, s in enumerate(self.svi_ids) if s not in drop]
        labels = {t: {s: v for s, v in lab.items() if s not in drop} for t, lab in self.labels.items()}
        return GeoDataset(
            trajectories=self.trajectories,
            svi_ids=[self.svi_ids[i] for i in keep],
            svi_locs=self.svi_locs[keep],
            images=self.images[keep],
            epsilon=self.epsilon,
            road_graph=self.road_graph,
            labels=labels,
        )
