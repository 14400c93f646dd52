"""Camera poses, per-dataset pose priors, camera matrices and ray generation.

Conventions:
  * world up is +z; cameras sit on a sphere of fixed radius and look at the origin
  * pitch is the polar angle from +z (pi/2 = equator), yaw the azimuth about +z
  * camera frame is x-right / y-down / z-forward
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch

from .errors import ConfigurationError

TWO_PI = 2.0 * math.pi

# keep sampled pitches away from the poles, where look-at is degenerate
PITCH_EPS = 1e-3

DEFAULT_RADIUS = 2.7
DEFAULT_FOV = 0.23


@dataclass(frozen=True)
class CameraPose:
    """A camera on the viewing sphere, looking at the origin."""

    pitch: float
    yaw: float
    radius: float = DEFAULT_RADIUS
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if not (0.0 < self.pitch < math.pi):
            raise ConfigurationError(f"pitch must lie in (0, pi), got {self.pitch}")
        if self.radius <= 0.0:
            raise ConfigurationError(f"radius must be positive, got {self.radius}")
        if not (0.0 < self.fov < math.pi):
            raise ConfigurationError(f"fov must lie in (0, pi), got {self.fov}")
        object.__setattr__(self, "yaw", float(self.yaw) % TWO_PI)

    def position(self) -> np.ndarray:
        """World-space camera position (spherical coordinates)."""
        sp, cp = math.sin(self.pitch), math.cos(self.pitch)
        sy, cy = math.sin(self.yaw), math.cos(self.yaw)
        return self.radius * np.array([sp * cy, sp * sy, cp])


@dataclass(frozen=True)
class GaussianLaw:
    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0.0:
            raise ConfigurationError(f"gaussian sigma must be >= 0, got {self.sigma}")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.normal(self.mu, self.sigma))


@dataclass(frozen=True)
class UniformLaw:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigurationError(f"uniform lo must be <= hi, got [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class FixedLaw:
    value: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.value)


AngleLaw = Union[GaussianLaw, UniformLaw, FixedLaw]


@dataclass(frozen=True)
class PoseDistribution:
    """Sampling prior over camera poses; radius and fov are fixed per dataset."""

    pitch_law: AngleLaw
    yaw_law: AngleLaw
    radius: float = DEFAULT_RADIUS
    fov: float = DEFAULT_FOV


# Per-dataset priors (pitch law, yaw law); 'custom' is declared in the run config.
POSE_PRIORS = {
    "bedroom": PoseDistribution(
        GaussianLaw(math.pi / 2, 0.10), GaussianLaw(math.pi / 2, 0.70)
    ),
    "church": PoseDistribution(
        FixedLaw(math.pi / 2),
        UniformLaw(math.pi / 2 - 5 * math.pi / 18, math.pi / 2 + 5 * math.pi / 18),
    ),
    "afhq": PoseDistribution(
        GaussianLaw(math.pi / 2, 0.13), GaussianLaw(math.pi / 2, 0.19)
    ),
    "cub": PoseDistribution(
        GaussianLaw(math.pi / 2, 0.13),
        UniformLaw(math.pi / 2 - 3 * math.pi / 4, math.pi / 2 + 3 * math.pi / 4),
    ),
}


def sample_pose(dist: PoseDistribution, rng: np.random.Generator) -> CameraPose:
    """Draw one pose from the prior; pitch clamped away from the poles."""
    pitch = dist.pitch_law.sample(rng)
    pitch = min(max(pitch, PITCH_EPS), math.pi - PITCH_EPS)
    yaw = dist.yaw_law.sample(rng)
    return CameraPose(pitch=pitch, yaw=yaw, radius=dist.radius, fov=dist.fov)


def sample_distinct_poses(
    dist: PoseDistribution,
    n: int,
    rng: np.random.Generator,
    min_sep: float = 1e-4,
    max_tries: int = 1000,
) -> list[CameraPose]:
    """Sample n poses that are pairwise distinct in at least one angle by min_sep.

    A pose colliding with an earlier one (both |dpitch| and |dyaw| < min_sep)
    is resampled; this is what contrastive batches require of their negatives.
    """
    poses: list[CameraPose] = []
    tries = 0
    while len(poses) < n:
        cand = sample_pose(dist, rng)
        clash = any(
            abs(cand.pitch - p.pitch) < min_sep and abs(cand.yaw - p.yaw) < min_sep
            for p in poses
        )
        if not clash:
            poses.append(cand)
        tries += 1
        if tries > max_tries + n:
            raise ConfigurationError(
                f"could not sample {n} distinct poses from prior {dist} "
                f"(separation {min_sep}); prior too degenerate"
            )
    return poses


def pose_to_matrix(pose: CameraPose, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Camera-to-world 4x4 transform for a pose looking at the origin.

    Columns of the rotation block are the world-space camera axes
    (x-right, y-down, z-forward); the forward axis points at the origin.
    """
    eye = pose.position()
    forward = -eye / np.linalg.norm(eye)
    # approximate 'down' is -world_up; exact down follows from orthogonalization
    down0 = np.array([0.0, 0.0, -1.0])
    right = np.cross(down0, forward)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ConfigurationError("pose is at a pole; look-at frame is degenerate")
    right = right / nr
    down = np.cross(forward, right)

    mat = np.eye(4)
    mat[:3, 0] = right
    mat[:3, 1] = down
    mat[:3, 2] = forward
    mat[:3, 3] = eye
    return torch.from_numpy(mat).to(dtype)


@dataclass
class RayBatch:
    """One pinhole ray per pixel, in world space."""

    origins: torch.Tensor  # [H, W, 3]
    directions: torch.Tensor  # [H, W, 3], unit norm
    near: float
    far: float

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ConfigurationError(f"require 0 < near < far, got [{self.near}, {self.far}]")


def _pixel_grid(resolution: int, dtype: torch.dtype) -> torch.Tensor:
    # corner-aligned: the outermost pixels sit exactly on the image corners,
    # so the corner-ray angle matches the closed-form pinhole expression
    if resolution == 1:
        return torch.zeros(1, dtype=dtype)
    return torch.linspace(-1.0, 1.0, resolution, dtype=dtype)


def generate_rays(
    pose: CameraPose,
    resolution: int,
    near: float | None = None,
    far: float | None = None,
    dtype: torch.dtype = torch.float32,
) -> RayBatch:
    """Pinhole rays through the pixel grid of a square image."""
    if resolution < 1:
        raise ConfigurationError(f"resolution must be >= 1, got {resolution}")
    if near is None:
        near = pose.radius - 1.2
    if far is None:
        far = pose.radius + 1.2

    tan_half = math.tan(pose.fov / 2.0)
    u = _pixel_grid(resolution, torch.float64) * tan_half
    vv, uu = torch.meshgrid(u, u, indexing="ij")  # rows = vertical offset (down)
    dirs_cam = torch.stack([uu, vv, torch.ones_like(uu)], dim=-1)  # [H, W, 3]
    dirs_cam = dirs_cam / dirs_cam.norm(dim=-1, keepdim=True)

    c2w = pose_to_matrix(pose, dtype=torch.float64)
    rot = c2w[:3, :3]
    dirs_world = dirs_cam @ rot.T
    origins = c2w[:3, 3].expand(resolution, resolution, 3)
    return RayBatch(
        origins=origins.to(dtype).contiguous(),
        directions=dirs_world.to(dtype).contiguous(),
        near=float(near),
        far=float(far),
    )


def pose_to_vector(pose: CameraPose, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """The 2-vector (pitch, yaw) regression target for this pose."""
    return torch.tensor([pose.pitch, pose.yaw], dtype=dtype)


def poses_to_tensor(poses: list[CameraPose], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack (pitch, yaw) targets for a batch of poses -> [N, 2]."""
    return torch.stack([pose_to_vector(p, dtype=dtype) for p in poses])


def vector_to_pose(
    vec, radius: float = DEFAULT_RADIUS, fov: float = DEFAULT_FOV
) -> CameraPose:
    """Inverse of pose_to_vector given the fixed radius/fov of the run."""
    pitch, yaw = float(vec[0]), float(vec[1])
    return CameraPose(pitch=pitch, yaw=yaw, radius=radius, fov=fov)
