"""Modality encoders: location, time, street-view image, and waypoint tokens."""

from __future__ import annotations

import math
from typing import Protocol, Sequence

import torch
from torch import nn

from .errors import ShapeMismatch

# direction vectors of the grid-cell location features: 0, 120 and 240 degrees
_ANGLES = (0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0)


class LocationEncoder(nn.Module):
    """Multi-scale sinusoidal grid-cell features followed by a small feed-forward projection.

    Raw features for ``S`` geometrically spaced wavelengths and three directions
    are laid out as ``[sin block | cos block]``, each block ordered
    (scale, direction), for ``6 * S`` raw channels. The projection is
    ``tanh(out(relu(proj(raw))))``; with wavelengths near the unit extent the
    raw features vary slowly, and the hidden layer lets nearby locations separate.
    """

    def __init__(
        self,
        dim: int = 128,
        num_scales: int = 64,
        lambda_min: float = 1.0,
        lambda_max: float = math.sqrt(2.0),
    ):
        super().__init__()
        if num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if not 0 < lambda_min <= lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")
        self.dim = dim
        self.num_scales = num_scales
        if num_scales == 1:
            wavelengths = torch.tensor([lambda_min], dtype=torch.float64)
        else:
            ratio = lambda_max / lambda_min
            s = torch.arange(num_scales, dtype=torch.float64) / (num_scales - 1)
            wavelengths = lambda_min * ratio**s
        directions = torch.tensor([[math.cos(a), math.sin(a)] for a in _ANGLES], dtype=torch.float64)
        self.register_buffer("wavelengths", wavelengths.float())
        self.register_buffer("directions", directions.float())
        self.proj = nn.Linear(6 * num_scales, dim)
        self.out = nn.Linear(dim, dim)

    @property
    def raw_dim(self) -> int:
        return 6 * self.num_scales

    def raw_features(self, coords: torch.Tensor) -> torch.Tensor:
        coords = coords.to(self.directions.dtype)
        along = coords @ self.directions.T  # (..., 3)
        phase = (2.0 * math.pi / self.wavelengths)[:, None] * along[..., None, :]  # (..., S, 3)
        phase = phase.flatten(-2)
        return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.out(torch.relu(self.proj(self.raw_features(coords)))))


class TimeEncoder(nn.Module):
    """Channel 0 is linear in time, the remaining channels are learnable sinusoids."""

    def __init__(self, dim: int = 128, min_period: float = 10.0, max_period: float = 20000.0):
        super().__init__()
        self.dim = dim
        periods = torch.logspace(math.log10(min_period), math.log10(max_period), max(dim - 1, 1))
        omega = torch.cat([torch.tensor([1.0 / max_period]), 2.0 * math.pi / periods[: dim - 1]])
        self.omega = nn.Parameter(omega.float())
        self.phi = nn.Parameter(torch.rand(dim) * 2.0 * math.pi)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        z = t.to(self.omega.dtype)[..., None] * self.omega + self.phi
        return torch.cat([z[..., :1], torch.sin(z[..., 1:])], dim=-1)


class Backbone(Protocol):
    """What the image encoder needs from a feature extractor."""

    feature_dim: int
    input_shape: tuple[int, ...]

    def __call__(self, images: torch.Tensor) -> torch.Tensor: ...


class PatchBackbone(nn.Module):
    """Tiny patch encoder for small synthetic images: strided conv, GELU, pooled moments."""

    def __init__(self, channels: int = 3, image_size: int = 16, patch: int = 4, width: int = 64):
        super().__init__()
        self.input_shape = (channels, image_size, image_size)
        self.feature_dim = 2 * width
        self.embed = nn.Conv2d(channels, width, kernel_size=patch, stride=patch)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        z = nn.functional.gelu(self.embed(images)).flatten(-2)
        # first and second moments over patches
        return torch.cat([z.mean(-1), z.pow(2).mean(-1)], dim=-1)


class FeatureBackbone(nn.Module):
    """Pass-through for precomputed feature vectors (loaded from a feature file)."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.input_shape = (feature_dim,)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return features


class ImageEncoder(nn.Module):
    def __init__(self, backbone: nn.Module, dim: int = 128, frozen_backbone: bool = True, activation=torch.tanh):
        super().__init__()
        self.backbone = backbone
        self.dim = dim
        self.proj = nn.Linear(backbone.feature_dim, dim)
        self.activation = activation
        self.frozen_backbone = frozen_backbone
        if frozen_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.backbone.input_shape)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        shape = self.input_shape
        if tuple(images.shape[-len(shape):]) != shape:
            raise ShapeMismatch(f"expected trailing shape {shape}, got {tuple(images.shape)}")
        lead = images.shape[: images.dim() - len(shape)]
        flat = images.reshape(-1, *shape).to(self.proj.weight.dtype)
        if self.frozen_backbone:
            with torch.no_grad():
                feats = self.backbone(flat)
        else:
            feats = self.backbone(flat)
        out = self.proj(feats)
        if self.activation is not None:
            out = self.activation(out)
        return out.reshape(*lead, self.dim)


def waypoint_token(
    coords: torch.Tensor, times: torch.Tensor, loc_encoder: LocationEncoder, time_encoder: TimeEncoder
) -> torch.Tensor:
    """Initial spatiotemporal token: location encoding plus time encoding."""
    return loc_encoder(coords) + time_encoder(times)


def parameter_names(module: nn.Module) -> Sequence[str]:
    return [n for n, _ in module.named_parameters()]
