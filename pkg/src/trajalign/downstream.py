"""Fine-tuning: set aggregation over trajectories, modality fusion, task heads and losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import MODALITY_BLOCKS, Config
from .dataset import TASK_TYPES, GeoDataset
from .errors import DimensionMismatch, EmptySet, NoLabeledAnchors, ShapeMismatch
from .model import Encoders
from .nif import window_trajectory

log = logging.getLogger(__name__)

BLOCK_ORDER = ("image", "location", "trajectory")


class Aggregator(nn.Module):
    """Permutation-invariant pooling of a set of trajectory embeddings.

    A learnable classification token joins the set; one pre-norm attention
    block runs over [cls | members] without positional encodings, and the
    output is read at the classification token.
    """

    def __init__(self, dim: int = 128, heads: int = 8, ff: int | None = None):
        super().__init__()
        ff = ff or 2 * dim
        self.cls = nn.Parameter(torch.randn(dim) * 0.02)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff), nn.GELU(), nn.Linear(ff, dim))
        self.norm_out = nn.LayerNorm(dim)

    def forward(self, members: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``members`` is (B, K, d) or (K, d); ``mask`` (B, K) marks real members."""
        single = members.dim() == 2
        if single:
            members = members[None]
            mask = None if mask is None else mask[None]
        b, k, d = members.shape
        if mask is None:
            mask = torch.ones(b, k, dtype=torch.bool)
        if k == 0 or not bool(mask.any(dim=1).all()):
            raise EmptySet("cannot aggregate an empty trajectory set")
        x = torch.cat([self.cls.expand(b, 1, d).to(members.dtype), members], dim=1)
        pad = torch.cat([torch.zeros(b, 1, dtype=torch.bool), ~mask], dim=1)
        # only the cls row is read out, so attention from other rows can be skipped
        y = self.norm1(x)
        attended, _ = self.attn(y[:, :1], y, y, key_padding_mask=pad, need_weights=False)
        h = x[:, 0] + attended[:, 0]
        h = h + self.ff(self.norm2(h))
        out = self.norm_out(h)
        return out[0] if single else out


def fuse(h_svi, h_loc, h_traj, mode: str = "full") -> torch.Tensor:
    """Concatenate the modality blocks kept by ``mode`` in (image, location, trajectory) order."""
    blocks = {"image": h_svi, "location": h_loc, "trajectory": h_traj}
    kept = [blocks[name] for name in MODALITY_BLOCKS[mode]]
    if any(b is None for b in kept):
        raise DimensionMismatch(f"mode {mode!r} needs {MODALITY_BLOCKS[mode]}")
    dims = {b.shape[-1] for b in kept}
    if len(dims) != 1 or len({b.shape[:-1] for b in kept}) != 1:
        raise DimensionMismatch(f"fused blocks disagree in shape: {[tuple(b.shape) for b in kept]}")
    return torch.cat(kept, dim=-1)


def split_fused(fused: torch.Tensor, mode: str = "full") -> dict[str, torch.Tensor]:
    names = MODALITY_BLOCKS[mode]
    d = fused.shape[-1] // len(names)
    return {name: fused[..., i * d : (i + 1) * d] for i, name in enumerate(names)}


class TaskHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int = 1024):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"head expects width {self.in_dim}, got {fused.shape[-1]}")
        return self.net(fused)


def predict(fused: torch.Tensor, head: TaskHead, task_type: str) -> torch.Tensor:
    """Regression: scalar per row. Classification: logits. Distribution: simplex."""
    out = head(fused)
    if task_type == "regression":
        return out.squeeze(-1)
    if task_type == "classification":
        return out
    if task_type == "distribution":
        return torch.softmax(out, dim=-1)
    raise ValueError(f"unknown task type {task_type!r}")


def task_loss(output: torch.Tensor, target: torch.Tensor, task_type: str) -> torch.Tensor:
    """``output`` is the raw head output (logits for the two categorical types)."""
    if task_type == "regression":
        return F.mse_loss(output.squeeze(-1), target)
    if task_type == "classification":
        return F.cross_entropy(output, target)
    if task_type == "distribution":
        return -(target * torch.log_softmax(output, dim=-1)).sum(-1).mean()
    raise ValueError(f"unknown task type {task_type!r}")


class FinetuneModel(nn.Module):
    """Aggregator plus head.

    Image and location embeddings are standardized per dimension with training
    statistics before fusion, and so are regression targets. Frozen embeddings
    are otherwise poorly scaled, which slows learning along low-variance
    directions that still carry signal.
    """

    def __init__(self, cfg: Config, task_type: str, out_dim: int):
        super().__init__()
        self.task_type = task_type
        self.mode = cfg.modality_mode
        self.aggregator = Aggregator(cfg.d, cfg.agg_heads)
        self.head = TaskHead(len(MODALITY_BLOCKS[self.mode]) * cfg.d, out_dim, cfg.head_hidden)
        self.register_buffer("target_mean", torch.zeros(()))
        self.register_buffer("target_std", torch.ones(()))
        for name in ("svi", "loc"):
            self.register_buffer(f"{name}_mean", torch.zeros(cfg.d))
            self.register_buffer(f"{name}_std", torch.ones(cfg.d))

    @property
    def uses_trajectories(self) -> bool:
        return "trajectory" in MODALITY_BLOCKS[self.mode]

    def raw(self, batch: "FinetuneBatch") -> torch.Tensor:
        h_traj = self.aggregator(batch.traj, batch.traj_mask) if self.uses_trajectories else None
        h_svi = (batch.h_svi - self.svi_mean) / self.svi_std
        h_loc = (batch.h_loc - self.loc_mean) / self.loc_std
        return self.head(fuse(h_svi, h_loc, h_traj, self.mode))

    def loss(self, batch: "FinetuneBatch") -> torch.Tensor:
        target = batch.targets
        if self.task_type == "regression":
            target = (target - self.target_mean) / self.target_std
        return task_loss(self.raw(batch), target, self.task_type)

    def forward(self, batch: "FinetuneBatch") -> torch.Tensor:
        out = self.raw(batch)
        if self.task_type == "regression":
            return out.squeeze(-1) * self.target_std + self.target_mean
        if self.task_type == "distribution":
            return torch.softmax(out, dim=-1)
        return out


@dataclass
class AnchorCache:
    """Frozen-encoder embeddings for labeled anchors.

    ``traj`` holds, per anchor, the embeddings of every intersecting trajectory
    at that anchor. Encoders are frozen during fine-tuning, so these never change.
    """

    svi_ids: list[str]
    h_svi: torch.Tensor
    h_loc: torch.Tensor
    traj: list[torch.Tensor]
    targets: torch.Tensor
    task_type: str

    def __len__(self) -> int:
        return len(self.svi_ids)


def target_tensor(values: Sequence, task_type: str) -> torch.Tensor:
    if task_type == "classification":
        return torch.as_tensor(np.asarray(values, dtype=np.int64))
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=torch.float32)


def labeled_anchors(dataset: GeoDataset, task: str) -> list[str]:
    """SVIs carrying a ``task`` label and at least one intersecting trajectory, in dataset order."""
    labels = dataset.labels.get(task, {})
    return [s for s in dataset.svi_ids if s in labels and dataset.intersecting[s]]


@torch.no_grad()
def build_anchor_cache(
    model: Encoders,
    dataset: GeoDataset,
    cfg: Config,
    task: str,
    svi_ids: Sequence[str] | None = None,
    chunk: int = 16,
) -> AnchorCache:
    svi_ids = list(svi_ids) if svi_ids is not None else labeled_anchors(dataset, task)
    if not svi_ids:
        raise NoLabeledAnchors(f"no labeled anchors for task {task!r}")
    task_type = TASK_TYPES[task]
    model.eval()
    rows = [dataset.svi_index[s] for s in svi_ids]
    h_svi = model.encode_images(dataset.images[rows]).float()
    h_loc = model.encode_locations(dataset.svi_locs[rows]).float()

    wanted = set(svi_ids)
    per_traj: dict[int, list] = {}
    for s in svi_ids:
        for ti, qp in dataset.intersecting[s]:
            per_traj.setdefault(ti, []).append(qp)
    emb: dict[tuple[int, str], torch.Tensor] = {}
    order = sorted(per_traj)
    for start in range(0, len(order), chunk):
        tis = order[start : start + chunk]
        trajs = [dataset.trajectories[t] for t in tis]
        windows = [window_trajectory(t, cfg.L, [cfg.seed, ti]) for t, ti in zip(trajs, tis)]
        points = [per_traj[t] for t in tis]
        if cfg.alignment_mode == "segment_based":
            members = [
                [dataset.segment_membership(ti, w.kept_indices, p) for p in pts]
                for ti, w, pts in zip(tis, windows, points)
            ]
            outs = model.segment_pooled(trajs, windows, members)
        else:
            outs = model.localized(trajs, windows, points)
        for ti, pts, out in zip(tis, points, outs):
            for p, e in zip(pts, out):
                if p.svi_id in wanted:
                    emb[(ti, p.svi_id)] = e.float()
    traj = [torch.stack([emb[(ti, s)] for ti, _ in dataset.intersecting[s]]) for s in svi_ids]
    labels = dataset.labels[task]
    targets = target_tensor([labels[s] for s in svi_ids], task_type)
    return AnchorCache(svi_ids, h_svi, h_loc, traj, targets, task_type)


@dataclass
class FinetuneBatch:
    svi_ids: list[str]
    h_svi: torch.Tensor
    h_loc: torch.Tensor
    traj: torch.Tensor  # (B, K, d) padded
    traj_mask: torch.Tensor  # (B, K)
    targets: torch.Tensor

    @property
    def set_sizes(self) -> list[int]:
        return self.traj_mask.sum(1).tolist()


def make_finetune_batch(cache: AnchorCache, rows: Sequence[int], rng: np.random.Generator, cap: int = 16) -> FinetuneBatch:
    sets = []
    for r in rows:
        members = cache.traj[r]
        if len(members) > cap:
            members = members[np.sort(rng.choice(len(members), size=cap, replace=False))]
        sets.append(members)
    k = max(len(s) for s in sets)
    d = cache.h_loc.shape[-1]
    traj = torch.zeros(len(rows), k, d)
    mask = torch.zeros(len(rows), k, dtype=torch.bool)
    for i, s in enumerate(sets):
        traj[i, : len(s)] = s
        mask[i, : len(s)] = True
    idx = torch.as_tensor(list(rows), dtype=torch.long)
    return FinetuneBatch([cache.svi_ids[r] for r in rows], cache.h_svi[idx], cache.h_loc[idx], traj, mask, cache.targets[idx])


def sample_finetune_batch(
    cache: AnchorCache,
    rng_seed,
    batch_anchors: int = 32,
    cap: int = 16,
    rows: Sequence[int] | None = None,
) -> FinetuneBatch:
    """Uniformly sample anchors, then up to ``cap`` intersecting trajectories for each."""
    pool = np.arange(len(cache)) if rows is None else np.asarray(rows)
    if len(pool) == 0:
        raise NoLabeledAnchors("no labeled anchors to sample")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(pool, size=min(batch_anchors, len(pool)), replace=False)
    return make_finetune_batch(cache, chosen.tolist(), rng, cap)


def split_anchors(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 2]).permutation(n)
    n_train = min(n - 1, max(1, int(round(train_fraction * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def finetune_step(model: FinetuneModel, batch: FinetuneBatch, optimizer: torch.optim.Optimizer) -> float:
    model.train()
    loss = model.loss(batch)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def out_dim_for(task_type: str, targets: torch.Tensor) -> int:
    if task_type == "regression":
        return 1
    if task_type == "classification":
        return int(targets.max()) + 1
    return int(targets.shape[-1])


def build_finetune_model(cfg: Config, cache: AnchorCache, train_rows: Sequence[int], n_classes: int | None = None) -> FinetuneModel:
    torch.manual_seed(cfg.seed)
    out_dim = n_classes or out_dim_for(cache.task_type, cache.targets)
    model = FinetuneModel(cfg, cache.task_type, out_dim)
    idx = torch.as_tensor(np.asarray(train_rows), dtype=torch.long)
    for name, x in (("svi", cache.h_svi[idx]), ("loc", cache.h_loc[idx])):
        getattr(model, f"{name}_mean").copy_(x.mean(0))
        if len(x) > 1:
            getattr(model, f"{name}_std").copy_(x.std(0).clamp_min(1e-6))
    if cache.task_type == "regression":
        y = cache.targets[idx]
        model.target_mean.fill_(float(y.mean()))
        model.target_std.fill_(float(y.std()) if len(y) > 1 and float(y.std()) > 0 else 1.0)
    return model


def run_finetuning(
    model: FinetuneModel,
    cache: AnchorCache,
    train_rows: Sequence[int],
    cfg: Config,
    epochs: int,
    optimizer: torch.optim.Optimizer | None = None,
    start_epoch: int = 1,
) -> tuple[list[float], torch.optim.Optimizer]:
    if len(train_rows) == 0:
        raise NoLabeledAnchors("empty training split")
    optimizer = optimizer or torch.optim.Adam(model.parameters(), lr=cfg.finetune_lr, weight_decay=cfg.weight_decay)
    losses = []
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        order = rng.permutation(np.asarray(train_rows))
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.finetune_batch_anchors):
            rows = order[start : start + cfg.finetune_batch_anchors].tolist()
            batch = make_finetune_batch(cache, rows, rng, cfg.finetune_trajs_per_anchor)
            total += finetune_step(model, batch, optimizer) * len(rows)
            n += len(rows)
        losses.append(total / n)
        log.debug("finetune epoch %d loss %.4f", epoch, losses[-1])
    return losses, optimizer


@torch.no_grad()
def predict_rows(model: FinetuneModel, cache: AnchorCache, rows: Sequence[int], cfg: Config) -> tuple[list[str], torch.Tensor]:
    """Deterministic predictions: the trajectory subset per anchor is drawn from a fixed seed."""
    model.eval()
    rng = np.random.default_rng([cfg.seed, 4])
    batch = make_finetune_batch(cache, list(rows), rng, cfg.finetune_trajs_per_anchor)
    return batch.svi_ids, model(batch)
