"""Trajectory implicit function: a masked Transformer queried at arbitrary locations.

Waypoint tokens attend only to real waypoint tokens. Each query token attends
to the real waypoint tokens and to itself, so a batch of queries behaves
exactly like the same queries submitted one at a time. Waypoint rows never
depend on queries, so they are computed once and shared by every query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoders import LocationEncoder, TimeEncoder
from .errors import EmptyQuerySet, ModeMismatch, NoWaypointsOnSegment
from .geom import QueryPoint, Trajectory

SYNTHETIC = "synthetic"
MASKED = "masked"
TIME_MODES = (SYNTHETIC, MASKED)


@dataclass(frozen=True, eq=False)
class TrajectoryWindow:
    """Fixed-length view of a trajectory. Real waypoints come first, padding after."""

    trajectory_id: str
    coords: np.ndarray  # (L, 2), zero in padded slots
    times: np.ndarray  # (L,), zero in padded slots
    mask: np.ndarray  # (L,) bool
    kept_indices: np.ndarray  # original indices of the real slots

    def __len__(self) -> int:
        return len(self.mask)

    @property
    def num_real(self) -> int:
        return int(self.mask.sum())


def window_trajectory(traj: Trajectory, length: int = 240, rng_seed=None) -> TrajectoryWindow:
    n = len(traj)
    if n > length:
        rng = np.random.default_rng(rng_seed)
        kept = np.sort(rng.choice(n, size=length, replace=False))
    else:
        kept = np.arange(n)
    coords = np.zeros((length, 2))
    times = np.zeros(length)
    mask = np.zeros(length, dtype=bool)
    k = len(kept)
    coords[:k] = traj.coords[kept]
    times[:k] = traj.times[kept]
    mask[:k] = True
    return TrajectoryWindow(traj.id, coords, times, mask, kept)


def window_tokens(
    window: TrajectoryWindow,
    loc_encoder: LocationEncoder,
    time_encoder: TimeEncoder,
    time_origin: float = 0.0,
) -> torch.Tensor:
    """Waypoint tokens for a window, zero vectors in padded slots."""
    dtype = loc_encoder.proj.weight.dtype
    coords = torch.as_tensor(window.coords, dtype=dtype)
    times = torch.as_tensor(window.times - time_origin, dtype=dtype)
    tok = loc_encoder(coords) + time_encoder(times)
    return tok * torch.as_tensor(window.mask, dtype=dtype)[:, None]


def build_query_token(
    qp: QueryPoint,
    mode: str,
    traj: Trajectory,
    loc_encoder: LocationEncoder,
    time_encoder: TimeEncoder,
    m_time: torch.Tensor,
    time_origin: float = 0.0,
) -> torch.Tensor:
    return build_query_tokens([qp], mode, loc_encoder, time_encoder, m_time, time_origin)[0]


def build_query_tokens(
    points: Sequence[QueryPoint],
    mode: str,
    loc_encoder: LocationEncoder,
    time_encoder: TimeEncoder,
    m_time: torch.Tensor,
    time_origin: float = 0.0,
) -> torch.Tensor:
    """Query-location tokens: trajectory location encoding plus a time embedding.

    ``synthetic`` encodes each point's interpolated time; ``masked`` adds the
    shared learnable ``m_time`` instead.
    """
    dtype = loc_encoder.proj.weight.dtype
    locs = torch.as_tensor(np.array([p.location for p in points], dtype=np.float64).reshape(-1, 2), dtype=dtype)
    loc_part = loc_encoder(locs)
    if mode == SYNTHETIC:
        if any(p.est_time is None for p in points):
            raise ModeMismatch("synthetic time mode needs est_time on every query point")
        t = torch.as_tensor([p.est_time - time_origin for p in points], dtype=dtype)
        return loc_part + time_encoder(t)
    if mode == MASKED:
        return loc_part + m_time
    raise ModeMismatch(f"unknown time mode {mode!r}")


def _real_extent(wp_mask: torch.Tensor) -> int:
    cols = torch.nonzero(wp_mask.any(0))
    return int(cols.max()) + 1 if len(cols) else 0


def waypoint_attention_mask(wp_mask: torch.Tensor) -> torch.Tensor:
    """Boolean (B, L, L) mask, True where row may attend to column.

    Real waypoints see real waypoints; padded slots see only themselves, so
    they stay finite and are never attended to.
    """
    eye = torch.eye(wp_mask.shape[1], dtype=torch.bool)
    return (wp_mask[:, None, :] & wp_mask[:, :, None]) | (eye[None] & ~wp_mask[:, :, None])


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, ff: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff), nn.GELU(), nn.Linear(ff, dim))

    def _split(self, z: torch.Tensor) -> torch.Tensor:
        b, s, d = z.shape
        return z.view(b, s, self.heads, d // self.heads).transpose(1, 2)

    def _merge(self, z: torch.Tensor) -> torch.Tensor:
        b, h, s, e = z.shape
        return z.transpose(1, 2).reshape(b, s, h * e)

    def _residual(self, x: torch.Tensor, att: torch.Tensor) -> torch.Tensor:
        x = x + self.out(self._merge(att))
        return x + self.ff(self.norm2(x))

    def forward(self, wp: torch.Tensor, q: torch.Tensor, allowed: torch.Tensor, key_mask: torch.Tensor):
        qw, kw, vw = (self._split(z) for z in self.qkv(self.norm1(wp)).chunk(3, dim=-1))
        new_wp = self._residual(wp, F.scaled_dot_product_attention(qw, kw, vw, attn_mask=allowed[:, None]))
        if q.shape[1] == 0:
            return new_wp, q
        qq, kq, vq = (self._split(z) for z in self.qkv(self.norm1(q)).chunk(3, dim=-1))
        # each query sees [real waypoint keys..., its own key], in that fixed order
        scale = qq.shape[-1] ** -0.5
        to_wp = (qq @ kw.transpose(-2, -1)) * scale
        to_wp = to_wp.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        to_self = (qq * kq).sum(-1, keepdim=True) * scale
        weights = torch.softmax(torch.cat([to_wp, to_self], dim=-1), dim=-1)
        att = weights[..., :-1] @ vw + weights[..., -1:] * vq
        return new_wp, self._residual(q, att)


class ImplicitTrajectoryEncoder(nn.Module):
    """Pre-norm Transformer over ``[waypoint tokens | query tokens]``."""

    def __init__(self, dim: int = 128, layers: int = 4, heads: int = 8, ff: int = 512):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.blocks = nn.ModuleList(_Block(dim, heads, ff) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(
        self,
        wp_tokens: torch.Tensor,
        wp_mask: torch.Tensor,
        q_tokens: torch.Tensor,
        q_mask: torch.Tensor | None = None,
        return_waypoints: bool = False,
    ):
        """Run the encoder.

        Args:
            wp_tokens: (B, L, d) waypoint tokens.
            wp_mask: (B, L) bool, True for real waypoints.
            q_tokens: (B, Q, d) query tokens.
            q_mask: (B, Q) bool, True for real queries. Queries never see each
                other, so padded queries only produce ignorable rows.

        Returns:
            (B, Q, d) localized embeddings, plus (B, L', d) waypoint outputs when
            ``return_waypoints``. L' may be shorter than L: columns past the
            longest real window are padding and are trimmed before the pass.
        """
        if q_tokens.shape[1] == 0:
            raise EmptyQuerySet("at least one query token is required")
        wp, q = self._run(wp_tokens, wp_mask, q_tokens)
        return (q, wp) if return_waypoints else q

    def encode_waypoints(self, wp_tokens: torch.Tensor, wp_mask: torch.Tensor) -> torch.Tensor:
        """Waypoint-position outputs alone; identical to the waypoint rows of a query run."""
        return self._run(wp_tokens, wp_mask, wp_tokens[:, :0])[0]

    def _run(self, wp_tokens, wp_mask, q_tokens):
        wp_mask = wp_mask.bool()
        n = _real_extent(wp_mask)
        # padding never influences real outputs, so it can be dropped
        wp, wp_mask = wp_tokens[:, :n], wp_mask[:, :n]
        allowed = waypoint_attention_mask(wp_mask)
        q = q_tokens
        for block in self.blocks:
            wp, q = block(wp, q, allowed, wp_mask)
        return self.norm(wp), self.norm(q)


def segment_pooled_embedding(waypoint_outputs: torch.Tensor, membership) -> torch.Tensor:
    """Mean of the waypoint outputs whose waypoints belong to one road segment."""
    member = torch.as_tensor(np.asarray(membership, dtype=bool))
    count = int(member.sum())
    if count == 0:
        raise NoWaypointsOnSegment("no waypoint lies on the requested segment")
    if len(member) > waypoint_outputs.shape[0]:
        raise ValueError("membership mask is longer than the waypoint outputs")
    rows = waypoint_outputs[: len(member)][member]
    return rows.sum(0) / count


def init_m_time(dim: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(dim) / math.sqrt(dim))
