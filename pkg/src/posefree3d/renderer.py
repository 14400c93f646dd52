"""Emission-absorption volume rendering of a point-decodable field.

composite() is the compositing primitive (alpha blending with transmittance);
render() marches camera rays through a generator field and produces the
low-resolution feature map / rgb image / depth / opacity maps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .errors import ConfigurationError
from .geometry import CameraPose, generate_rays

DEPTH_EPS = 1e-6


@dataclass
class RenderConfig:
    feature_resolution: int = 32
    samples_per_ray: int = 96
    near: float = 1.5
    far: float = 3.9
    stratified: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)  # rgb in [0, 1]

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ConfigurationError(f"samples_per_ray must be >= 2, got {self.samples_per_ray}")
        if self.feature_resolution < 1:
            raise ConfigurationError(
                f"feature_resolution must be >= 1, got {self.feature_resolution}"
            )
        if not (0.0 < self.near < self.far):
            raise ConfigurationError(f"require 0 < near < far, got [{self.near}, {self.far}]")

    def eval_variant(self) -> "RenderConfig":
        """Deterministic copy for evaluation-time rendering."""
        return replace(self, stratified=False)


@dataclass
class RenderOutput:
    """Per-pixel render results; channels-last, batch dim optional."""

    feature_map: torch.Tensor  # [..., H, W, C_feat], channels 0..2 are rgb_low
    depth: torch.Tensor  # [..., H, W], scene units
    opacity: torch.Tensor  # [..., H, W] in [0, 1]

    @property
    def rgb_low(self) -> torch.Tensor:  # [..., H, W, 3] in [0, 1]
        return self.feature_map[..., :3]


def composite(
    densities: torch.Tensor,
    values: torch.Tensor,
    t_vals: torch.Tensor,
    background: torch.Tensor,
    last_delta: float,
    empty_depth: float | None = None,
    check: bool = False,
):
    """Alpha-composite samples along rays.

    densities: [..., S] nonnegative; values: [..., S, C]; t_vals: [..., S] or
    [S], strictly increasing; background: [C] (or broadcastable to [..., C]);
    last_delta: spacing assigned to the final sample; empty_depth: depth
    reported for rays with (near-)zero opacity, defaulting to the end of the
    sampled interval.

    Returns (value [..., C], depth [...], opacity [...]). A fully transparent
    ray returns the background with opacity 0.
    """
    if t_vals.dim() < densities.dim():
        t_vals = t_vals.expand(densities.shape)
    deltas = t_vals[..., 1:] - t_vals[..., :-1]
    if bool((deltas <= 0).any()):
        raise ConfigurationError("t_vals must be strictly increasing")
    last = torch.full_like(t_vals[..., :1], float(last_delta))
    deltas = torch.cat([deltas, last], dim=-1)

    alpha = 1.0 - torch.exp(-densities * deltas)  # [..., S]
    one_minus = 1.0 - alpha
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), one_minus], dim=-1), dim=-1
    )  # [..., S+1]; trans[..., i] = prod_{j<i}(1 - alpha_j)
    weights = trans[..., :-1] * alpha  # [..., S]
    trans_final = trans[..., -1]

    opacity = 1.0 - trans_final
    value = (weights[..., None] * values).sum(dim=-2) + trans_final[..., None] * background
    if empty_depth is None:
        far = t_vals[..., -1] + last_delta
    else:
        far = torch.full_like(opacity, float(empty_depth))
    depth_num = (weights * t_vals).sum(dim=-1)
    depth = torch.where(
        opacity > DEPTH_EPS, depth_num / opacity.clamp(min=DEPTH_EPS), far
    )

    if check:
        wsum = weights.sum(dim=-1)
        assert bool((weights >= 0).all()), "compositing weights must be nonnegative"
        assert bool((wsum <= 1.0 + 1e-5).all()), "weights must sum to <= 1"
        assert bool(((wsum - opacity).abs() <= 1e-5).all()), "weights must sum to opacity"
    return value, depth, opacity


def _sample_depths(
    cfg: RenderConfig,
    shape: Sequence[int],
    dtype: torch.dtype,
    rng: torch.Generator | None,
) -> torch.Tensor:
    """Per-ray sample depths in [near, far]; one uniform jitter per ray."""
    s = cfg.samples_per_ray
    step = (cfg.far - cfg.near) / s
    base = torch.arange(s, dtype=dtype)
    if cfg.stratified:
        jitter = torch.rand(*shape, 1, generator=rng, dtype=dtype)
    else:
        jitter = torch.full((*shape, 1), 0.5, dtype=dtype)
    return cfg.near + (base + jitter) * step


def render_batch(
    gen,
    z: torch.Tensor,
    poses: Sequence[CameraPose],
    cfg: RenderConfig,
    rng: torch.Generator | None = None,
    check: bool = False,
    dtype: torch.dtype = torch.float32,
) -> RenderOutput:
    """Render a batch of latents, one pose each.

    gen must expose field(z) -> callable(points [B, K, 3]) -> PointDecode;
    z is [B, n_z] (ignored by analytic stand-ins).
    """
    b = len(poses)
    res, s = cfg.feature_resolution, cfg.samples_per_ray
    field = gen.field(z)

    rays = [generate_rays(p, res, near=cfg.near, far=cfg.far, dtype=dtype) for p in poses]
    origins = torch.stack([r.origins for r in rays])  # [B, H, W, 3]
    dirs = torch.stack([r.directions for r in rays])

    t_vals = _sample_depths(cfg, (b, res, res), dtype, rng)  # [B, H, W, S]
    points = origins[..., None, :] + t_vals[..., None] * dirs[..., None, :]
    decoded = field(points.reshape(b, res * res * s, 3))
    sigma = decoded.density.view(b, res, res, s)
    feats = decoded.feature.view(b, res, res, s, -1)

    c_feat = feats.shape[-1]
    background = torch.zeros(c_feat, dtype=dtype)
    background[:3] = torch.tensor(cfg.background, dtype=dtype)
    last_delta = (cfg.far - cfg.near) / s
    value, depth, opacity = composite(
        sigma, feats, t_vals, background, last_delta, empty_depth=cfg.far, check=check
    )
    return RenderOutput(feature_map=value, depth=depth, opacity=opacity)


def render(
    gen,
    z: torch.Tensor,
    pose: CameraPose,
    cfg: RenderConfig,
    rng: torch.Generator | None = None,
    check: bool = False,
    dtype: torch.dtype = torch.float32,
) -> RenderOutput:
    """Render a single (z, pose); see render_batch."""
    if z is not None and z.dim() == 1:
        z = z[None]
    out = render_batch(gen, z, [pose], cfg, rng=rng, check=check, dtype=dtype)
    return RenderOutput(
        feature_map=out.feature_map[0], depth=out.depth[0], opacity=out.opacity[0]
    )
