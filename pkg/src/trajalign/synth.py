"""Seeded synthetic world with planted ground truth for every task.

The road network is a regular grid in the unit square. Trajectories are
random walks along grid edges; every node passed is recorded as a waypoint,
with extra waypoints sampled at a fixed interval in between, so the
polyline footprint follows the road exactly and the speed between any two
consecutive waypoints equals the speed of that traversal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import GeoDataset
from .errors import InvalidConfig
from .geom import RoadSegment, Trajectory

ARTERIAL, LOCAL = 1, 0
IMAGE_SIZE = 16


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    grid_n: int = 8
    n_trajectories: int = 200
    n_svis: int = 500
    n_categories: int = 5
    extent_km: float = 3.0  # side of the unit square
    speed_noise: float = 0.10  # per-traversal multiplicative bound
    sample_interval: float = 20.0  # seconds between interior waypoints
    min_hops: int = 6
    max_hops: int = 30
    arterial_lines: int = 3  # per axis
    arterial_bias: float = 3.0  # random-walk preference for arterials
    hazard_fraction: float = 0.2
    image_mode: str = "image"  # or "features"

    def validate(self):
        if self.grid_n < 2:
            raise InvalidConfig("grid_n must be >= 2")
        if min(self.n_trajectories, self.n_svis, self.n_categories) < 1:
            raise InvalidConfig("counts must be >= 1")
        if not 0 <= self.speed_noise < 1:
            raise InvalidConfig("speed_noise must lie in [0, 1)")
        if self.min_hops < 1 or self.max_hops < self.min_hops:
            raise InvalidConfig("need 1 <= min_hops <= max_hops")
        if self.image_mode not in ("image", "features"):
            raise InvalidConfig(f"unknown image_mode {self.image_mode!r}")


@dataclass(frozen=True)
class Traversal:
    traj_index: int
    segment_id: int
    t_start: float
    t_end: float
    speed: float  # units/s
    brake_events: int


@dataclass(eq=False)
class SyntheticWorld:
    config: WorldConfig
    nodes: np.ndarray  # (n*n, 2)
    road_graph: list[RoadSegment]
    segment_nodes: np.ndarray  # (S, 2) node indices
    road_class: np.ndarray  # (S,)
    speed: np.ndarray  # (S,) planted, units/s
    aoi: np.ndarray  # (S, C) simplex
    hazard_rate: np.ndarray  # (n*n,) Poisson rate per pass, 0 if not hazardous
    trajectories: list[Trajectory]
    traversals: list[Traversal]
    svi_ids: list[str]
    svi_locs: np.ndarray  # (N, 2)
    svi_segment: np.ndarray  # (N,)
    quality: np.ndarray  # (N,)
    images: np.ndarray | None = None  # (N, 3, 16, 16)
    features: np.ndarray | None = None  # (N, k)
    labels: dict[str, dict[str, object]] = field(default_factory=dict)

    @property
    def traversal_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.road_graph), dtype=np.int64)
        for tr in self.traversals:
            counts[tr.segment_id] += 1
        return counts

    @property
    def popularity_class(self) -> np.ndarray:
        return popularity_classes(self.traversal_counts)

    def observations(self) -> np.ndarray:
        return self.images if self.images is not None else self.features

    def to_dataset(self, epsilon: float) -> GeoDataset:
        return GeoDataset(
            trajectories=list(self.trajectories),
            svi_ids=list(self.svi_ids),
            svi_locs=self.svi_locs,
            images=torch.as_tensor(self.observations(), dtype=torch.float32),
            epsilon=epsilon,
            road_graph=list(self.road_graph),
            labels={k: dict(v) for k, v in self.labels.items()},
        )


def popularity_classes(counts: np.ndarray, n_classes: int = 4) -> np.ndarray:
    """Quantile binning of traversal counts; monotone non-decreasing in the count."""
    counts = np.asarray(counts, dtype=np.float64)
    edges = np.quantile(counts, np.arange(1, n_classes) / n_classes)
    return np.searchsorted(edges, counts, side="left").astype(np.int64)


def _grid(n: int):
    coords = np.linspace(0.0, 1.0, n)
    nodes = np.array([(coords[i], coords[j]) for i in range(n) for j in range(n)])
    seg_nodes = []
    for i in range(n):
        for j in range(n - 1):
            seg_nodes.append((i * n + j, i * n + j + 1))  # along y
    for i in range(n - 1):
        for j in range(n):
            seg_nodes.append((i * n + j, (i + 1) * n + j))  # along x
    seg_nodes = np.array(seg_nodes)
    graph = [
        RoadSegment(k, tuple(nodes[a]), tuple(nodes[b])) for k, (a, b) in enumerate(seg_nodes)
    ]
    return nodes, seg_nodes, graph


def generate_world(
    seed: int = 7,
    grid_n: int = 8,
    n_trajectories: int = 200,
    n_svis: int = 500,
    n_categories: int = 5,
    **overrides,
) -> SyntheticWorld:
    cfg = WorldConfig(
        seed=seed, grid_n=grid_n, n_trajectories=n_trajectories, n_svis=n_svis, n_categories=n_categories, **overrides
    )
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.grid_n
    nodes, seg_nodes, graph = _grid(n)
    n_seg = len(graph)

    # road classes: a few arterial lines per axis
    art_y = rng.choice(n, size=min(cfg.arterial_lines, n), replace=False)
    art_x = rng.choice(n, size=min(cfg.arterial_lines, n), replace=False)
    road_class = np.zeros(n_seg, dtype=np.int64)
    for k, (a, b) in enumerate(seg_nodes):
        ia, ja = divmod(a, n)
        ib, jb = divmod(b, n)
        if (ia == ib and ia in art_y) or (ja == jb and ja in art_x):
            road_class[k] = ARTERIAL
    kmh = np.where(road_class == ARTERIAL, rng.uniform(40.0, 65.0, n_seg), rng.uniform(15.0, 35.0, n_seg))
    speed = kmh / 3.6 / (cfg.extent_km * 1000.0)

    centers = rng.uniform(0.0, 1.0, size=(cfg.n_categories, 2))
    mids = 0.5 * (nodes[seg_nodes[:, 0]] + nodes[seg_nodes[:, 1]])
    logits = -np.sum((mids[:, None, :] - centers[None]) ** 2, axis=-1) / (2 * 0.3**2)
    logits = logits + 0.5 * rng.standard_normal(logits.shape)
    aoi = np.exp(logits - logits.max(axis=1, keepdims=True))
    aoi /= aoi.sum(axis=1, keepdims=True)

    hazardous = rng.random(len(nodes)) < cfg.hazard_fraction
    hazard_rate = np.where(hazardous, rng.uniform(0.5, 2.0, len(nodes)), 0.0)

    # adjacency: node -> [(neighbor, segment id)]
    adjacency: list[list[tuple[int, int]]] = [[] for _ in nodes]
    for k, (a, b) in enumerate(seg_nodes):
        adjacency[a].append((b, k))
        adjacency[b].append((a, k))

    trajectories: list[Trajectory] = []
    traversals: list[Traversal] = []
    for ti in range(cfg.n_trajectories):
        hops = int(rng.integers(cfg.min_hops, cfg.max_hops + 1))
        node = int(rng.integers(len(nodes)))
        prev = -1
        t = float(rng.uniform(0.0, 86400.0))
        coords = [nodes[node]]
        times = [t]
        next_sample = t + cfg.sample_interval
        for _ in range(hops):
            options = [(nb, k) for nb, k in adjacency[node] if nb != prev] or adjacency[node]
            w = np.array([cfg.arterial_bias if road_class[k] == ARTERIAL else 1.0 for _, k in options])
            nb, k = options[int(rng.choice(len(options), p=w / w.sum()))]
            factor = 1.0 + rng.uniform(-cfg.speed_noise, cfg.speed_noise)
            v = speed[k] * factor
            a_pt, b_pt = nodes[node], nodes[nb]
            duration = float(np.linalg.norm(b_pt - a_pt)) / v
            t_end = t + duration
            while next_sample < t_end - 1e-6:
                if next_sample > t + 1e-6:
                    frac = (next_sample - t) / duration
                    coords.append(a_pt + frac * (b_pt - a_pt))
                    times.append(next_sample)
                next_sample += cfg.sample_interval
            coords.append(b_pt)
            times.append(t_end)
            brakes = int(rng.poisson(hazard_rate[nb])) if hazard_rate[nb] > 0 else 0
            traversals.append(Traversal(ti, k, t, t_end, v, brakes))
            prev, node, t = node, nb, t_end
        trajectories.append(Trajectory(f"traj{ti:04d}", np.clip(np.array(coords), 0.0, 1.0), np.array(times)))

    svi_segment = rng.integers(0, n_seg, size=cfg.n_svis)
    frac = rng.uniform(0.05, 0.95, size=cfg.n_svis)
    a_pts = nodes[seg_nodes[svi_segment, 0]]
    b_pts = nodes[seg_nodes[svi_segment, 1]]
    svi_locs = a_pts + frac[:, None] * (b_pts - a_pts)
    svi_ids = [f"svi{k:04d}" for k in range(cfg.n_svis)]
    quality = rng.uniform(0.85, 1.0, size=cfg.n_svis)

    palette = rng.uniform(0.0, 1.0, size=(cfg.n_categories, 3))
    obs_rng = np.random.default_rng([cfg.seed, 1])
    images = features = None
    if cfg.image_mode == "image":
        images = np.stack(
            [
                _render(aoi[s], palette, road_class[s], seg_nodes[s], obs_rng)
                for s in svi_segment
            ]
        ).astype(np.float32)
    else:
        features = np.concatenate(
            [
                aoi[svi_segment],
                np.eye(2)[road_class[svi_segment]],
                0.05 * obs_rng.standard_normal((cfg.n_svis, 8)),
            ],
            axis=1,
        ).astype(np.float32)

    world = SyntheticWorld(
        config=cfg,
        nodes=nodes,
        road_graph=graph,
        segment_nodes=seg_nodes,
        road_class=road_class,
        speed=speed,
        aoi=aoi,
        hazard_rate=hazard_rate,
        trajectories=trajectories,
        traversals=traversals,
        svi_ids=svi_ids,
        svi_locs=svi_locs,
        svi_segment=svi_segment,
        quality=quality,
        images=images,
        features=features,
    )
    world.labels = derive_labels(world)
    return world


def _render(aoi_row, palette, road_class, seg, rng) -> np.ndarray:
    """16x16 RGB texture: AOI-weighted scene colors around a road band."""
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE))
    base = aoi_row @ palette
    cats = rng.choice(len(aoi_row), size=(IMAGE_SIZE, IMAGE_SIZE), p=aoi_row)
    img[:] = (0.5 * base[:, None, None] + 0.5 * palette[cats].transpose(2, 0, 1))
    width = 6 if road_class == ARTERIAL else 2
    lo = IMAGE_SIZE // 2 - width // 2
    img[:, lo : lo + width, :] = 0.35
    if road_class == ARTERIAL:
        img[:, IMAGE_SIZE // 2, ::4] = 0.95  # lane marking
    if abs(seg[1] - seg[0]) != 1:  # road runs along x: rotate the view
        img = img.transpose(0, 2, 1)
    img = img + 0.03 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def speed_kmh(world: SyntheticWorld, units_per_s):
    return np.asarray(units_per_s) * world.config.extent_km * 3600.0


def derive_speed_labels(world: SyntheticWorld) -> dict[str, float]:
    """Mean realized traversal speed (km/h) of each SVI's segment; untraversed segments dropped."""
    total = np.zeros(len(world.road_graph))
    count = np.zeros(len(world.road_graph), dtype=np.int64)
    for tr in world.traversals:
        total[tr.segment_id] += tr.speed
        count[tr.segment_id] += 1
    out = {}
    for sid, seg in zip(world.svi_ids, world.svi_segment):
        if count[seg]:
            out[sid] = float(speed_kmh(world, total[seg] / count[seg]))
    return out


def derive_labels(world: SyntheticWorld) -> dict[str, dict[str, object]]:
    pop = world.popularity_class
    brakes = np.zeros(len(world.road_graph))
    for tr in world.traversals:
        brakes[tr.segment_id] += tr.brake_events
    return {
        "speed": derive_speed_labels(world),
        "popularity": {s: int(pop[g]) for s, g in zip(world.svi_ids, world.svi_segment)},
        "aoi": {s: world.aoi[g].tolist() for s, g in zip(world.svi_ids, world.svi_segment)},
        "hbe": {s: float(brakes[g]) for s, g in zip(world.svi_ids, world.svi_segment)},
    }
