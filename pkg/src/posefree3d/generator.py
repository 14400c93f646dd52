"""Latent -> tri-plane radiance field.

The generator maps a latent z to a style vector w, synthesizes three
axis-aligned feature planes from w, and decodes density + features at
arbitrary 3D points by summing bilinear samples of the three planes.
The field is a function of z and position only; the rendering pose never
enters, so the same z decodes identically from any viewpoint.
"""

from __future__ import annotations

import warnings
from typing import Callable, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

# ----------------------------------------------------------------------------


class PointDecode(NamedTuple):
    density: torch.Tensor  # [..., K], >= 0
    feature: torch.Tensor  # [..., K, C_feat]; channels 0..2 are rgb in [0, 1]


class MappingNetwork(nn.Module):
    """z -> w MLP."""

    def __init__(self, z_dim: int = 64, w_dim: int = 64, hidden: int = 64, n_layers: int = 2):
        super().__init__()
        if n_layers < 1:
            raise ConfigurationError("mapping network needs at least one layer")
        dims = [z_dim] + [hidden] * (n_layers - 1) + [w_dim]
        self.z_dim = z_dim
        self.w_dim = w_dim
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.z_dim:
            raise ConfigurationError(f"latent dim {z.shape[-1]} != configured {self.z_dim}")
        x = z
        for layer in self.layers[:-1]:
            x = F.leaky_relu(layer(x), 0.2)
        return self.layers[-1](x)


class PlaneSynthesizer(nn.Module):
    """w -> three feature planes, each [C_plane, R, R]."""

    def __init__(
        self,
        w_dim: int = 64,
        resolution: int = 32,
        channels: int = 16,
        hidden: int = 64,
        base_resolution: int = 4,
    ):
        super().__init__()
        if resolution < 1:
            raise ConfigurationError(f"plane resolution must be >= 1, got {resolution}")
        self.resolution = resolution
        self.channels = channels
        self.base_resolution = min(base_resolution, resolution)
        self.hidden = hidden
        self.base = nn.Linear(w_dim, hidden * self.base_resolution**2)

        blocks = []
        size = self.base_resolution
        while size < resolution:
            blocks.append(nn.Conv2d(hidden, hidden, 3, padding=1))
            size *= 2
        self.blocks = nn.ModuleList(blocks)
        self.to_planes = nn.Conv2d(hidden, 3 * channels, 3, padding=1)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        squeeze = w.dim() == 1
        if squeeze:
            w = w[None]
        b = w.shape[0]
        x = F.leaky_relu(self.base(w), 0.2)
        x = x.view(b, self.hidden, self.base_resolution, self.base_resolution)
        for block in self.blocks:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(block(x), 0.2)
        if x.shape[-1] != self.resolution:
            x = F.interpolate(x, size=self.resolution, mode="bilinear", align_corners=True)
        planes = self.to_planes(x).view(b, 3, self.channels, self.resolution, self.resolution)
        return planes[0] if squeeze else planes


def sample_triplane(planes: torch.Tensor, points: torch.Tensor, debug: bool = False) -> torch.Tensor:
    """Project points onto the (xy, xz, yz) planes, bilinearly sample, sum.

    planes: [3, C, R, R] or [B, 3, C, R, R]; plane grids are corner-aligned,
            grid node (i, j) of a plane sits at coordinates (a_i, b_j) with
            a, b = linspace(-1, 1, R) over that plane's two projected axes.
    points: [K, 3] or [B, K, 3] in the [-1, 1]^3 cube (clamped otherwise).
    returns [K, C] or [B, K, C].
    """
    squeeze = planes.dim() == 4
    if squeeze:
        planes, points = planes[None], points[None]
    b, _, c, r, _ = planes.shape
    k = points.shape[1]

    if debug and bool((points.abs() > 1.0 + 1e-6).any()):
        warnings.warn("sample_triplane: points outside [-1,1]^3 were clamped")
    pts = points.clamp(-1.0, 1.0)

    proj = torch.stack(
        [pts[..., [0, 1]], pts[..., [0, 2]], pts[..., [1, 2]]], dim=1
    )  # [B, 3, K, 2] of (first, second) projected coordinates
    # grid_sample wants (x=width, y=height); our first coordinate indexes rows
    grid = proj[..., [1, 0]].reshape(b * 3, 1, k, 2)
    feats = F.grid_sample(
        planes.reshape(b * 3, c, r, r),
        grid,
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )  # [B*3, C, 1, K]
    feats = feats.view(b, 3, c, k).sum(dim=1).transpose(1, 2)  # [B, K, C]
    return feats[0] if squeeze else feats


class PointDecoder(nn.Module):
    """Plane features -> (density, feature) with density = softplus, rgb = sigmoid."""

    def __init__(self, plane_channels: int = 16, feature_channels: int = 8, hidden: int = 32):
        super().__init__()
        if feature_channels < 3:
            raise ConfigurationError("feature_channels must be >= 3 (rgb head)")
        self.feature_channels = feature_channels
        self.net = nn.Sequential(
            nn.Linear(plane_channels, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1 + feature_channels),
        )

    def forward(self, features: torch.Tensor) -> PointDecode:
        raw = self.net(features)
        density = F.softplus(raw[..., 0])
        rgb = torch.sigmoid(raw[..., 1:4])
        rest = raw[..., 4:]
        return PointDecode(density=density, feature=torch.cat([rgb, rest], dim=-1))


# ----------------------------------------------------------------------------


class TriPlaneGenerator(nn.Module):
    """The full latent -> radiance-field stack."""

    def __init__(
        self,
        n_z: int = 64,
        n_w: int = 64,
        plane_resolution: int = 32,
        plane_channels: int = 16,
        feature_channels: int = 8,
        mapping_hidden: int = 64,
        synth_hidden: int = 64,
        decoder_hidden: int = 32,
    ):
        super().__init__()
        self.n_z = n_z
        self.n_w = n_w
        self.feature_channels = feature_channels
        self.mapping = MappingNetwork(n_z, n_w, hidden=mapping_hidden)
        self.synthesizer = PlaneSynthesizer(
            n_w, plane_resolution, plane_channels, hidden=synth_hidden
        )
        self.decoder = PointDecoder(plane_channels, feature_channels, hidden=decoder_hidden)

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def synthesize_planes(self, w: torch.Tensor) -> torch.Tensor:
        return self.synthesizer(w)

    def decode_points(self, planes: torch.Tensor, points: torch.Tensor) -> PointDecode:
        return self.decoder(sample_triplane(planes, points))

    def field(self, z: torch.Tensor) -> Callable[[torch.Tensor], PointDecode]:
        """Bind z into a position -> (density, feature) field.

        Accepts z of shape [n_z] or [B, n_z]; the returned callable takes
        points of matching shape ([K, 3] or [B, K, 3]).
        """
        planes = self.synthesize_planes(self.map_latent(z))
        return lambda points: self.decode_points(planes, points)

    def sample_latent(self, batch: int, rng: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(batch, self.n_z, generator=rng)
