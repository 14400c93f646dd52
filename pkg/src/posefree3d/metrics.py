"""Evaluation metrics: Frechet distance, k-NN precision/recall, a depth-map
distribution distance, pose-embedding diagnostics and pose sweeps.

Feature extraction uses a fixed-seed random convolutional projection network.
Absolute values are therefore not comparable to published numbers computed
with pretrained extractors; they are meant for trend comparisons between runs
of this codebase only (the extractor_id tag guards against mixing).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation
from .geometry import CameraPose, PoseDistribution, sample_distinct_poses
from .renderer import RenderOutput

NEG_EIG_TOL = -1e-6


@dataclass
class FeatureSet:
    features: np.ndarray  # [n, d] float64
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ConfigurationError("features must be an [n, d] matrix")
        n, d = self.features.shape
        if n < d + 1:
            raise ConfigurationError(
                f"need n >= d + 1 samples for covariance estimation, got n={n}, d={d}"
            )
        if not np.isfinite(self.features).all():
            raise ConfigurationError("features contain non-finite values")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if eigvals.min() < NEG_EIG_TOL:
        warnings.warn(f"clipping negative covariance eigenvalue {eigvals.min():.3e}")
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.extractor_id != b.extractor_id:
        raise ConfigurationError(
            f"feature sets come from different extractors: "
            f"{a.extractor_id!r} vs {b.extractor_id!r}"
        )
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False))

    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    eigvals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if eigvals.min() < NEG_EIG_TOL:
        warnings.warn(f"clipping negative cross-covariance eigenvalue {eigvals.min():.3e}")
    trace_sqrt = np.sqrt(np.clip(eigvals, 0.0, None)).sum()

    fd = float(
        ((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt
    )
    if fd < NEG_EIG_TOL:
        warnings.warn(f"Frechet distance {fd:.3e} below the numerical floor; clamping to 0")
    return max(fd, 0.0)


class RandomFeatureExtractor(nn.Module):
    """Fixed-seed random convolutional projection, versioned by extractor_id."""

    def __init__(self, in_channels: int = 3, feature_dim: int = 32, seed: int = 0xF1D0):
        super().__init__()
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.seed = seed
        self.conv1 = nn.Conv2d(in_channels, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, feature_dim, 3, stride=2, padding=1)
        g = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            fan_in = p[0].numel() if p.dim() > 1 else p.numel()
            with torch.no_grad():
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def extractor_id(self) -> str:
        return f"randconv-v1/c{self.in_channels}/d{self.feature_dim}/s{self.seed}"

    @torch.no_grad()
    def extract(self, images: torch.Tensor, chunk: int = 256) -> FeatureSet:
        """images [N, C, H, W] -> FeatureSet of spatially pooled responses."""
        feats = []
        for i in range(0, images.shape[0], chunk):
            x = images[i : i + chunk].float()
            x = F.leaky_relu(self.conv1(x), 0.2)
            x = F.leaky_relu(self.conv2(x), 0.2)
            x = self.conv3(x)
            feats.append(x.mean(dim=(2, 3)))
        return FeatureSet(torch.cat(feats).double().numpy(), self.extractor_id)


def precision_recall(real: FeatureSet, fake: FeatureSet, k: int = 3) -> tuple[float, float]:
    """k-NN hypersphere manifold membership.

    precision: fraction of fake features inside the real manifold (union of
    hyperspheres with per-point radius = distance to the k-th neighbour);
    recall: the symmetric statement.
    """
    if real.extractor_id != fake.extractor_id:
        raise ConfigurationError("precision/recall needs features from one extractor")
    for name, fs in (("real", real), ("fake", fake)):
        if k >= fs.features.shape[0]:
            raise ConfigurationError(
                f"k={k} must be smaller than the {name} set size {fs.features.shape[0]}"
            )
    return (
        _manifold_fraction(real.features, fake.features, k),
        _manifold_fraction(fake.features, real.features, k),
    )


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(np.maximum(d2, 0.0))


def _manifold_fraction(support: np.ndarray, query: np.ndarray, k: int) -> float:
    """Fraction of query points within the k-NN radius of any support point."""
    d_ss = _pairwise_dist(support, support)
    radii = np.sort(d_ss, axis=1)[:, k]  # column 0 is the self-distance 0
    d_qs = _pairwise_dist(query, support)
    inside = (d_qs <= radii[None, :]).any(axis=1)
    return float(inside.mean())


def depth_feature_set(
    depths: np.ndarray, near: float, far: float, extractor: RandomFeatureExtractor
) -> FeatureSet:
    """Normalize depth maps [N, h, w] to [0, 1] by [near, far] and extract features."""
    depths = np.asarray(depths, dtype=np.float64)
    norm = np.clip((depths - near) / (far - near), 0.0, 1.0)
    tensor = torch.from_numpy(norm).float()[:, None]
    return extractor.extract(tensor)


def depth_quality(
    gen_depths: np.ndarray,
    ref_depths: np.ndarray,
    near: float,
    far: float,
    extractor: RandomFeatureExtractor | None = None,
) -> float:
    """Frechet distance between generated and reference depth-map sets."""
    gen_depths = np.asarray(gen_depths)
    ref_depths = np.asarray(ref_depths)
    if gen_depths.shape[1:] != ref_depths.shape[1:]:
        raise ConfigurationError(
            f"depth resolution mismatch: {gen_depths.shape[1:]} vs {ref_depths.shape[1:]}"
        )
    if extractor is None:
        extractor = RandomFeatureExtractor(in_channels=1)
    return frechet_distance(
        depth_feature_set(gen_depths, near, far, extractor),
        depth_feature_set(ref_depths, near, far, extractor),
    )


# ----------------------------------------------------------------------------
# pose-embedding diagnostics


@dataclass
class EmbeddingDiagnostics:
    same_pose_sim: float  # mean cosine over same-pose, different-latent pairs
    diff_pose_sim: float  # mean cosine over different-pose pairs
    gap: float  # same - diff
    probe_r2: float  # held-out R^2 of a linear (pitch, yaw) probe on v


def _r_squared(pred: np.ndarray, target: np.ndarray) -> float:
    ss_res = ((target - pred) ** 2).sum()
    ss_tot = ((target - target.mean()) ** 2).sum()
    if ss_tot <= 1e-12:
        return 0.0
    return 1.0 - ss_res / ss_tot


def embedding_diagnostics(
    synth,
    disc,
    pose_dist: PoseDistribution,
    n_poses: int,
    n_latents: int,
    rng: np.random.Generator,
) -> EmbeddingDiagnostics:
    """Render a pose x latent grid and measure how the embedding organizes pose.

    synth must expose sample_latent(n, torch.Generator) and
    images(z, poses) -> ImagePair. The probe fits least squares from v to
    (pitch, yaw) on half the grid and reports mean R^2 on the held-out half.
    """
    if not disc.variant.has_embedding_head:
        raise ContractViolation(
            f"variant {disc.variant.kind!r} has no embedding head to diagnose"
        )
    if n_poses < 2 or n_latents < 2:
        raise ConfigurationError("need at least 2 poses and 2 latents")

    poses = sample_distinct_poses(pose_dist, n_poses, rng)
    tg = torch.Generator().manual_seed(int(rng.integers(2**31)))
    z = synth.sample_latent(n_latents, tg)  # [L, n_z]

    v = []
    with torch.no_grad():
        for pose in poses:
            pair = synth.images(z, [pose] * n_latents)
            v.append(disc(pair).embedding)
    v = torch.stack(v).double().numpy()  # [P, L, m]
    p, l, m = v.shape

    sims = np.einsum("pim,qjm->piqj", v, v)  # cosine; embeddings are unit norm
    same, diff = [], []
    for a in range(p):
        for i in range(l):
            for b in range(p):
                for j in range(l):
                    if a == b and i == j:
                        continue
                    (same if a == b else diff).append(sims[a, i, b, j])
    same_mean, diff_mean = float(np.mean(same)), float(np.mean(diff))

    # linear probe with bias, split half/half at the grid-cell level
    x = v.reshape(p * l, m)
    y = np.repeat(
        np.array([[pose.pitch, pose.yaw] for pose in poses]), l, axis=0
    )  # [P*L, 2]
    order = rng.permutation(p * l)
    half = p * l // 2
    tr, te = order[:half], order[half:]
    xb = np.concatenate([x, np.ones((p * l, 1))], axis=1)
    coef, *_ = np.linalg.lstsq(xb[tr], y[tr], rcond=None)
    pred = xb[te] @ coef
    r2 = float(np.mean([_r_squared(pred[:, c], y[te][:, c]) for c in range(2)]))

    return EmbeddingDiagnostics(
        same_pose_sim=same_mean,
        diff_pose_sim=diff_mean,
        gap=same_mean - diff_mean,
        probe_r2=r2,
    )


# ----------------------------------------------------------------------------
# pose sweeps


@dataclass
class SweepResult:
    yaws: np.ndarray  # [steps], radians
    images: torch.Tensor  # [steps, 3, Hf, Wf] in [-1, 1]
    depths: torch.Tensor  # [steps, h, w] scene units


def pose_sweep(
    synth,
    z: torch.Tensor,
    yaw_range: tuple[float, float],
    steps: int,
    pitch: float = math.pi / 2,
) -> SweepResult:
    """Render one latent across evenly spaced yaws.

    synth must expose render(z, poses) -> (RenderOutput, ImagePair) and a
    pose_template(pitch, yaw) -> CameraPose carrying the run's radius/fov.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    yaws = np.linspace(yaw_range[0], yaw_range[1], steps)
    poses = [synth.pose_template(pitch, float(y)) for y in yaws]
    zb = z[None] if z.dim() == 1 else z
    zb = zb.expand(len(poses), -1)
    with torch.no_grad():
        out, pair = synth.render(zb, poses)
    return SweepResult(yaws=yaws, images=pair.high, depths=out.depth)
