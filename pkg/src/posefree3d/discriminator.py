"""Discriminator variants sharing one convolutional trunk.

All variants read the 6-channel (high, low_upsampled) pair. They differ only
in which heads are exposed:
  * pose_conditioned     logit only, rendering pose injected into the trunk
  * regression           logit + explicit (pitch, yaw) estimate
  * implicit             logit + l2-normalized m-dim pose embedding
  * regression+implicit  logit + both auxiliary heads

Every head (and the conditioning projection) is built regardless of the
configured kind, so two variants constructed under the same seed share
identical parameters; the kind only routes which outputs are produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation
from .superres import ImagePair

KIND_POSE_CONDITIONED = "pose_conditioned"
KIND_REGRESSION = "regression"
KIND_IMPLICIT = "implicit"
KIND_ENSEMBLE = "regression+implicit"
VARIANT_KINDS = (KIND_POSE_CONDITIONED, KIND_REGRESSION, KIND_IMPLICIT, KIND_ENSEMBLE)

NORM_EPS = 1e-8


@dataclass(frozen=True)
class DiscVariant:
    kind: str
    m: int = 24  # pose-embedding dimension, used by the implicit kinds

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigurationError(f"unknown discriminator kind {self.kind!r}")
        if self.m < 2:
            raise ConfigurationError(f"embedding dimension m must be >= 2, got {self.m}")

    @property
    def has_pose_head(self) -> bool:
        return self.kind in (KIND_REGRESSION, KIND_ENSEMBLE)

    @property
    def has_embedding_head(self) -> bool:
        return self.kind in (KIND_IMPLICIT, KIND_ENSEMBLE)


@dataclass
class DiscriminatorOutput:
    logit: torch.Tensor  # [B]
    pose_estimate: Optional[torch.Tensor] = None  # [B, 2]
    embedding: Optional[torch.Tensor] = None  # [B, m], unit norm


def normalize_embedding(raw: torch.Tensor) -> torch.Tensor:
    """raw / ||raw||_2 along the last dim, with an epsilon guard at zero."""
    norm = raw.norm(dim=-1, keepdim=True).clamp(min=NORM_EPS)
    return raw / norm


class Discriminator(nn.Module):
    def __init__(
        self,
        variant: DiscVariant,
        resolution: int = 32,
        channels: tuple[int, ...] = (32, 64, 64, 64),
        trunk_dim: int = 64,
    ):
        super().__init__()
        self.variant = variant
        self.resolution = resolution
        convs = []
        in_ch = 6
        size = resolution
        for ch in channels:
            convs.append(nn.Conv2d(in_ch, ch, 3, stride=2, padding=1))
            in_ch = ch
            size = (size + 1) // 2
        self.convs = nn.ModuleList(convs)
        # flatten, not pool: pose evidence is spatial
        self.fc = nn.Linear(in_ch * size * size, trunk_dim)
        self.head_logit = nn.Linear(trunk_dim, 1)
        self.head_pose = nn.Linear(trunk_dim, 2)
        self.head_embed = nn.Linear(trunk_dim, variant.m)
        self.pose_proj = nn.Linear(2, trunk_dim)

    def forward(
        self, images: ImagePair, condition_pose: torch.Tensor | None = None
    ) -> DiscriminatorOutput:
        conditioned = self.variant.kind == KIND_POSE_CONDITIONED
        if conditioned and condition_pose is None:
            raise ContractViolation("pose_conditioned discriminator requires condition_pose")
        if not conditioned and condition_pose is not None:
            raise ContractViolation(
                f"variant {self.variant.kind!r} does not take a condition pose"
            )

        x = images.as_input()
        if x.shape[-1] != self.resolution:
            raise ConfigurationError(
                f"discriminator built for {self.resolution}px input, got {x.shape[-1]}px"
            )
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        feat = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        if conditioned:
            feat = feat + self.pose_proj(condition_pose)

        out = DiscriminatorOutput(logit=self.head_logit(feat).squeeze(-1))
        if self.variant.has_pose_head:
            out.pose_estimate = self.head_pose(feat)
        if self.variant.has_embedding_head:
            raw = self.head_embed(feat)
            if raw.shape[-1] != self.variant.m:
                raise ConfigurationError(
                    f"embedding head width {raw.shape[-1]} != variant m {self.variant.m}"
                )
            out.embedding = normalize_embedding(raw)
        return out


def discriminate(
    disc: Discriminator, images: ImagePair, condition_pose: torch.Tensor | None = None
) -> DiscriminatorOutput:
    return disc(images, condition_pose=condition_pose)
