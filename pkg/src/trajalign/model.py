"""The pretrained encoder bundle and its batched embedding helpers."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import Config
from .encoders import FeatureBackbone, ImageEncoder, LocationEncoder, PatchBackbone, TimeEncoder
from .geom import QueryPoint, Trajectory
from .nif import (
    ImplicitTrajectoryEncoder,
    TrajectoryWindow,
    build_query_tokens,
    init_m_time,
    segment_pooled_embedding,
    window_tokens,
)


def build_backbone(cfg: Config, obs_shape: Sequence[int]) -> nn.Module:
    if cfg.backbone == "features":
        return FeatureBackbone(int(obs_shape[0]))
    channels, size = int(obs_shape[0]), int(obs_shape[-1])
    return PatchBackbone(channels=channels, image_size=size)


class Encoders(nn.Module):
    """Image, two location encoders, time encoder, and the trajectory implicit function."""

    def __init__(self, cfg: Config, backbone: nn.Module):
        super().__init__()
        self.time_mode = cfg.time_mode
        self.relative_time = cfg.relative_time
        self.svi_loc = LocationEncoder(cfg.d, cfg.S, cfg.lambda_min, cfg.lambda_max)
        self.traj_loc = LocationEncoder(cfg.d, cfg.S, cfg.lambda_min, cfg.lambda_max)
        self.time = TimeEncoder(cfg.d)
        self.image = ImageEncoder(backbone, cfg.d, frozen_backbone=True)
        self.nif = ImplicitTrajectoryEncoder(cfg.d, cfg.nif_layers, cfg.nif_heads, cfg.nif_ff)
        self.m_time = init_m_time(cfg.d)

    @classmethod
    def build(cls, cfg: Config, obs_shape: Sequence[int]) -> "Encoders":
        torch.manual_seed(cfg.seed)
        return cls(cfg, build_backbone(cfg, obs_shape))

    @property
    def dtype(self) -> torch.dtype:
        return self.m_time.dtype

    def time_origin(self, traj: Trajectory) -> float:
        return float(traj.times[0]) if self.relative_time else 0.0

    def encode_locations(self, locs) -> torch.Tensor:
        return self.svi_loc(torch.as_tensor(np.asarray(locs), dtype=self.dtype))

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return self.image(images)

    def _waypoint_batch(self, trajs: Sequence[Trajectory], windows: Sequence[TrajectoryWindow]):
        tokens = torch.stack(
            [window_tokens(w, self.traj_loc, self.time, self.time_origin(t)) for t, w in zip(trajs, windows)]
        )
        mask = torch.as_tensor(np.stack([w.mask for w in windows]))
        return tokens, mask

    def query_tokens(self, traj: Trajectory, points: Sequence[QueryPoint]) -> torch.Tensor:
        return build_query_tokens(points, self.time_mode, self.traj_loc, self.time, self.m_time, self.time_origin(traj))

    def localized(
        self,
        trajs: Sequence[Trajectory],
        windows: Sequence[TrajectoryWindow],
        points: Sequence[Sequence[QueryPoint]],
    ) -> list[torch.Tensor]:
        """Localized trajectory embeddings, one (Q_i, d) tensor per trajectory."""
        wp, wp_mask = self._waypoint_batch(trajs, windows)
        qmax = max(len(p) for p in points)
        q = torch.zeros(len(trajs), qmax, wp.shape[-1], dtype=wp.dtype)
        q_mask = torch.zeros(len(trajs), qmax, dtype=torch.bool)
        for i, (t, p) in enumerate(zip(trajs, points)):
            q[i, : len(p)] = self.query_tokens(t, p)
            q_mask[i, : len(p)] = True
        out = self.nif(wp, wp_mask, q, q_mask)
        return [out[i, : len(p)] for i, p in enumerate(points)]

    def segment_pooled(
        self,
        trajs: Sequence[Trajectory],
        windows: Sequence[TrajectoryWindow],
        memberships: Sequence[Sequence[np.ndarray]],
    ) -> list[torch.Tensor]:
        """Segment-level stand-ins: per query, the mean waypoint output on its road segment."""
        wp, wp_mask = self._waypoint_batch(trajs, windows)
        outs = self.nif.encode_waypoints(wp, wp_mask)
        result = []
        for i, (w, members) in enumerate(zip(windows, memberships)):
            rows = outs[i, : w.num_real]
            result.append(torch.stack([segment_pooled_embedding(rows, m) for m in members]))
        return result

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]
