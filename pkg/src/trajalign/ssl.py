"""Contrastive pretraining: InfoNCE, the three-pair objective, and the negative queue."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config
from .dataset import GeoDataset
from .errors import DimensionMismatch, EmptyBatch, NoEligibleTrajectories, NonPositiveTemperature, ZeroVector
from .geom import QueryPoint, Trajectory
from .model import Encoders
from .nif import TrajectoryWindow, window_trajectory

log = logging.getLogger(__name__)

# which loss terms each modality mode trains: (image-loc, traj-loc, traj-image)
MODALITY_TERMS = {
    "full": (True, True, True),
    "sv+loc": (True, False, False),
    "loc": (True, False, False),
    "sv": (True, False, False),
    "traj+loc": (False, True, False),
}


def info_nce(u, v_plus, negatives, tau: float) -> torch.Tensor:
    """Single-anchor InfoNCE with cosine similarity; zero when there are no negatives."""
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    u = torch.as_tensor(u)
    v_plus = torch.as_tensor(v_plus, dtype=u.dtype)
    negs = torch.as_tensor(np.asarray(negatives) if not torch.is_tensor(negatives) else negatives, dtype=u.dtype)
    negs = negs.reshape(-1, u.shape[-1])
    for name, vec in (("u", u), ("v_plus", v_plus)):
        if torch.linalg.vector_norm(vec) == 0:
            raise ZeroVector(f"{name} is the zero vector")
    if len(negs) and torch.any(torch.linalg.vector_norm(negs, dim=-1) == 0):
        raise ZeroVector("a negative is the zero vector")
    return info_nce_batch(u[None], v_plus[None], negs, None, tau)[0]


def info_nce_batch(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    neg_mask: torch.Tensor | None,
    tau: float,
) -> torch.Tensor:
    """Per-row InfoNCE.

    ``negatives`` is a shared (K, d) pool; ``neg_mask`` (N, K) marks which
    entries count as negatives for each row (all of them when None).
    Stabilized with log-sum-exp, so large similarity/temperature ratios are safe.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    a = F.normalize(anchors, dim=-1)
    p = F.normalize(positives, dim=-1)
    pos = (a * p).sum(-1) / tau
    if negatives.shape[0] == 0:
        return pos - pos
    neg = a @ F.normalize(negatives, dim=-1).T / tau
    if neg_mask is not None:
        neg = neg.masked_fill(~neg_mask, float("-inf"))
    logits = torch.cat([pos[:, None], neg], dim=1)
    return torch.logsumexp(logits, dim=1) - pos


class NegativeQueue:
    """FIFO store of detached location embeddings, each with the location it encodes."""

    def __init__(self, dim: int, capacity: int = 2048):
        self.dim = dim
        self.capacity = capacity
        self._items: deque[tuple[torch.Tensor, tuple[float, float] | None]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, items, keys: Sequence | None = None) -> "NegativeQueue":
        items = list(items) if not torch.is_tensor(items) else list(items.unbind(0)) if items.dim() > 1 else [items]
        if keys is None:
            keys = [None] * len(items)
        for item, key in zip(items, keys):
            if item.shape != (self.dim,):
                raise DimensionMismatch(f"queue holds {self.dim}-d embeddings, got {tuple(item.shape)}")
            k = None if key is None else (float(key[0]), float(key[1]))
            self._items.append((item.detach().clone(), k))
        return self

    def snapshot(self, dtype=torch.float32) -> tuple[torch.Tensor, np.ndarray]:
        """Immutable copy: (K, d) embeddings and (K, 2) keys (NaN where unknown)."""
        if not self._items:
            return torch.zeros(0, self.dim, dtype=dtype), np.zeros((0, 2))
        emb = torch.stack([e for e, _ in self._items]).to(dtype)
        keys = np.array([k if k is not None else (np.nan, np.nan) for _, k in self._items])
        return emb, keys

    def state(self) -> dict:
        emb, keys = self.snapshot()
        return {"embeddings": emb, "keys": keys, "capacity": self.capacity}

    @classmethod
    def from_state(cls, dim: int, state: dict) -> "NegativeQueue":
        q = cls(dim, int(state["capacity"]))
        keys = np.asarray(state["keys"]).reshape(-1, 2)
        q.push(
            torch.as_tensor(state["embeddings"]).reshape(-1, dim),
            [None if np.isnan(k).any() else k for k in keys],
        )
        return q


@dataclass(eq=False)
class PretrainBatch:
    """One trajectory and up to ``pretrain_svis_per_traj`` SVIs on its footprint."""

    traj_index: int
    trajectory: Trajectory
    window: TrajectoryWindow
    points: list[QueryPoint]
    images: torch.Tensor  # (Q, *obs shape), augmented
    locations: np.ndarray  # (Q, 2)
    memberships: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)


def augment_image(image: torch.Tensor, rng_seed=None, enabled: bool = True) -> torch.Tensor:
    """Random resized crop, horizontal flip, brightness/contrast jitter.

    Feature vectors (1-D inputs) are returned unchanged.
    """
    if not enabled or image.dim() != 3:
        return image
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    c, h, w = image.shape
    area = h * w * rng.uniform(0.6, 1.0)
    aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
    ch = int(round(min(h, max(2, np.sqrt(area / aspect)))))
    cw = int(round(min(w, max(2, np.sqrt(area * aspect)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[None, :, top : top + ch, left : left + cw]
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)[0]
    if rng.random() < 0.5:
        out = out.flip(-1)
    brightness = rng.uniform(0.8, 1.2)
    contrast = rng.uniform(0.8, 1.2)
    mean = out.mean()
    out = (out - mean) * contrast + mean * brightness
    return out.clamp(0.0, 1.0)


def make_pretrain_batch(
    dataset: GeoDataset,
    traj_index: int,
    rng: np.random.Generator,
    cfg: Config,
    with_membership: bool = False,
    chosen: Sequence[int] | None = None,
) -> PretrainBatch:
    """Batch for one trajectory; ``chosen`` indexes its query set (sampled when None)."""
    traj = dataset.trajectories[traj_index]
    qs = dataset.query_sets[traj_index].points
    if chosen is None:
        k = min(cfg.pretrain_svis_per_traj, len(qs))
        chosen = rng.choice(len(qs), size=k, replace=False)
    points = [qs[i] for i in chosen]
    window = window_trajectory(traj, cfg.L, rng)
    rows = [dataset.svi_index[p.svi_id] for p in points]
    images = torch.stack([augment_image(dataset.images[r], rng, cfg.augment) for r in rows])
    locs = dataset.svi_locs[rows]
    members = [dataset.segment_membership(traj_index, window.kept_indices, p) for p in points] if with_membership else []
    return PretrainBatch(traj_index, traj, window, points, images, locs, members)


def sample_pretrain_batch(dataset: GeoDataset, rng_seed, cfg: Config) -> PretrainBatch:
    eligible = dataset.eligible_trajectories
    if not eligible:
        raise NoEligibleTrajectories("no trajectory has a street-view image on its footprint")
    rng = np.random.default_rng(rng_seed)
    ti = eligible[int(rng.integers(len(eligible)))]
    return make_pretrain_batch(dataset, ti, rng, cfg, cfg.alignment_mode == "segment_based")


@dataclass
class StepEmbeddings:
    h_svi: torch.Tensor | None
    h_loc: torch.Tensor
    e_traj: torch.Tensor | None
    groups: torch.Tensor  # (N,) batch index of each tuple
    locations: np.ndarray  # (N, 2)


def embed_batches(model: Encoders, batches: Sequence[PretrainBatch], cfg: Config) -> StepEmbeddings:
    if not batches or not sum(len(b) for b in batches):
        raise EmptyBatch("no tuples to embed")
    use_img, use_tl, use_ti = MODALITY_TERMS[cfg.modality_mode]
    need_img = use_img or use_ti
    need_traj = use_tl or use_ti
    locs = np.concatenate([b.locations for b in batches])
    groups = torch.cat([torch.full((len(b),), i) for i, b in enumerate(batches)])
    h_loc = model.encode_locations(locs)
    h_svi = model.encode_images(torch.cat([b.images for b in batches])) if need_img else None
    e_traj = None
    if need_traj:
        trajs = [b.trajectory for b in batches]
        windows = [b.window for b in batches]
        if cfg.alignment_mode == "segment_based":
            parts = model.segment_pooled(trajs, windows, [b.memberships for b in batches])
        else:
            parts = model.localized(trajs, windows, [b.points for b in batches])
        e_traj = torch.cat(parts)
    return StepEmbeddings(h_svi, h_loc, e_traj, groups, locs)


def loc_negative_mask(anchor_locs: np.ndarray, queue_keys: np.ndarray) -> torch.Tensor:
    """Exclude queue entries that encode the anchor's own location."""
    if len(queue_keys) == 0:
        return torch.zeros(len(anchor_locs), 0, dtype=torch.bool)
    same = np.all(np.abs(anchor_locs[:, None, :] - queue_keys[None, :, :]) <= 1e-12, axis=-1)
    return torch.as_tensor(~same)


def pretrain_loss(
    emb: StepEmbeddings,
    queue_emb: torch.Tensor,
    queue_keys: np.ndarray,
    tau: float,
    terms: tuple[bool, bool, bool] = (True, True, True),
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Mean over tuples of the three pairwise InfoNCE terms.

    Image-location and trajectory-location pairs use the queue snapshot as
    negatives; the trajectory-image pair uses every other image of the step's
    minibatch. Negatives taken at the anchor's own location (the same SVI drawn
    for another trajectory) are excluded. Disabled terms contribute zero.
    """
    n = len(emb.h_loc)
    if n == 0:
        raise EmptyBatch("no tuples")
    zero = emb.h_loc.sum() * 0.0
    loc_mask = loc_negative_mask(emb.locations, queue_keys)
    queue_emb = queue_emb.to(emb.h_loc.dtype)
    t1 = t2 = t3 = zero
    if terms[0]:
        t1 = info_nce_batch(emb.h_svi, emb.h_loc, queue_emb, loc_mask, tau).mean()
    if terms[1]:
        t2 = info_nce_batch(emb.e_traj, emb.h_loc, queue_emb, loc_mask, tau).mean()
    if terms[2]:
        img_mask = loc_negative_mask(emb.locations, emb.locations)
        t3 = info_nce_batch(emb.e_traj, emb.h_svi, emb.h_svi, img_mask, tau).mean()
    return t1 + t2 + t3, (t1, t2, t3)


@dataclass
class StepResult:
    loss: float
    terms: tuple[float, float, float]
    n_tuples: int
    queue_size_at_loss: int
    updated: bool


def make_optimizer(model: Encoders, cfg: Config) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def pretrain_step(
    model: Encoders,
    batches: Sequence[PretrainBatch],
    queue: NegativeQueue,
    optimizer: torch.optim.Optimizer,
    cfg: Config,
    rng: np.random.Generator,
) -> StepResult:
    terms = MODALITY_TERMS[cfg.modality_mode]
    update = cfg.alignment_mode != "no_align"
    queue_emb, queue_keys = queue.snapshot(model.dtype)
    with torch.set_grad_enabled(update):
        emb = embed_batches(model, batches, cfg)
        loss, parts = pretrain_loss(emb, queue_emb, queue_keys, cfg.tau, terms)
    if update and loss.requires_grad:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    # anchors plus as many uniformly random locations, encoded with the updated weights
    random_locs = rng.uniform(0.0, 1.0, size=emb.locations.shape)
    push_locs = np.concatenate([emb.locations, random_locs])
    with torch.no_grad():
        queue.push(model.encode_locations(push_locs), push_locs)
    return StepResult(
        float(loss.detach()),
        tuple(float(p.detach()) for p in parts),
        len(emb.h_loc),
        len(queue_emb),
        update and loss.requires_grad,
    )


@dataclass
class EpochRecord:
    epoch: int
    total: float
    terms: tuple[float, float, float]

    def line(self) -> str:
        return "\t".join([str(self.epoch), repr(self.total)] + [repr(t) for t in self.terms])


def epoch_chunks(dataset: GeoDataset, cfg: Config, rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """Every (trajectory, SVI) pair exactly once, as shuffled per-trajectory chunks of at most the SVI cap."""
    chunks = []
    for ti in dataset.eligible_trajectories:
        order = rng.permutation(len(dataset.query_sets[ti]))
        n_chunks = -(-len(order) // cfg.pretrain_svis_per_traj)
        chunks += [(ti, part) for part in np.array_split(order, n_chunks)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def epoch_batches(dataset: GeoDataset, cfg: Config, epoch: int):
    """Yield lists of trajectory-centric batches holding about ``batch_tuples`` tuples."""
    rng = np.random.default_rng([cfg.seed, epoch])
    with_members = cfg.alignment_mode == "segment_based"
    group: list[PretrainBatch] = []
    count = 0
    for ti, chosen in epoch_chunks(dataset, cfg, rng):
        b = make_pretrain_batch(dataset, ti, rng, cfg, with_members, chosen)
        group.append(b)
        count += len(b)
        if count >= cfg.batch_tuples:
            yield group, rng
            group, count = [], 0
    if group:
        yield group, rng


@torch.no_grad()
def initial_queue(model: Encoders, cfg: Config) -> NegativeQueue:
    """A full queue of uniformly random locations, so the first steps see a full negative set."""
    rng = np.random.default_rng([cfg.seed, 6])
    locs = rng.uniform(0.0, 1.0, size=(cfg.queue_capacity, 2))
    return NegativeQueue(cfg.d, cfg.queue_capacity).push(model.encode_locations(locs), locs)


def run_pretraining(
    model: Encoders,
    dataset: GeoDataset,
    cfg: Config,
    epochs: int,
    queue: NegativeQueue | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_epoch: int = 1,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[list[EpochRecord], NegativeQueue, torch.optim.Optimizer]:
    """Train for ``epochs`` epochs starting at ``start_epoch`` (1-based)."""
    if not dataset.eligible_trajectories:
        raise NoEligibleTrajectories("no trajectory has a street-view image on its footprint")
    if queue is None:
        queue = initial_queue(model, cfg)
    optimizer = optimizer if optimizer is not None else make_optimizer(model, cfg)
    records = []
    model.train()
    for epoch in range(start_epoch, start_epoch + epochs):
        sums = np.zeros(4)
        n = 0
        for group, rng in epoch_batches(dataset, cfg, epoch):
            res = pretrain_step(model, group, queue, optimizer, cfg, rng)
            sums += res.n_tuples * np.array([res.loss, *res.terms])
            n += res.n_tuples
        means = sums / n
        rec = EpochRecord(epoch, float(means[0]), tuple(float(x) for x in means[1:]))
        log.info("epoch %d loss %.4f", epoch, rec.total)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records, queue, optimizer
