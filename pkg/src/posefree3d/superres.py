"""Super-resolution of the rendered feature map and the dual-image pair.

Discriminators consume an ImagePair: the super-resolved image together with a
parameter-free upsampling of the raw rendered rgb, so every judgement is tied
to rendering-consistent evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .renderer import RenderOutput


@dataclass
class ImagePair:
    high: torch.Tensor  # [B, 3, Hf, Wf] in [-1, 1]
    low_upsampled: torch.Tensor  # [B, 3, Hf, Wf] in [-1, 1], pure upsampling of rgb_low

    def __post_init__(self):
        if self.high.shape != self.low_upsampled.shape:
            raise ConfigurationError(
                f"pair members must share shape, got {tuple(self.high.shape)} vs "
                f"{tuple(self.low_upsampled.shape)}"
            )

    def __len__(self) -> int:
        return self.high.shape[0]

    def detach(self) -> "ImagePair":
        return ImagePair(self.high.detach(), self.low_upsampled.detach())

    def as_input(self) -> torch.Tensor:
        """6-channel discriminator input."""
        return torch.cat([self.high, self.low_upsampled], dim=1)


def cat_pairs(*pairs: ImagePair) -> ImagePair:
    return ImagePair(
        torch.cat([p.high for p in pairs]), torch.cat([p.low_upsampled for p in pairs])
    )


def upsample_rgb(rgb_low: torch.Tensor, final_resolution: int) -> torch.Tensor:
    """Bilinear upsampling of rendered rgb ([..., H, W, 3] in [0,1]) to [B,3,Hf,Wf] in [-1,1]."""
    if rgb_low.dim() == 3:
        rgb_low = rgb_low[None]
    x = rgb_low.permute(0, 3, 1, 2) * 2.0 - 1.0
    if x.shape[-1] == final_resolution:
        return x
    return F.interpolate(x, size=final_resolution, mode="bilinear", align_corners=False)


class SuperResolver(nn.Module):
    """Small convolutional stack lifting the feature map to the final image.

    The last convolution is zero-initialized, so a freshly built stack passes
    the rendered rgb through unchanged (residual-over-upsampling design).
    """

    def __init__(
        self,
        feature_channels: int = 8,
        feature_resolution: int = 32,
        final_resolution: int = 128,
        hidden: int = 32,
    ):
        super().__init__()
        if final_resolution < feature_resolution or final_resolution % feature_resolution:
            raise ConfigurationError(
                f"final resolution {final_resolution} must be an integer multiple of "
                f"feature resolution {feature_resolution}"
            )
        self.scale = final_resolution // feature_resolution
        self.final_resolution = final_resolution
        self.conv1 = nn.Conv2d(feature_channels + 3, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.to_rgb = nn.Conv2d(hidden, 3 * self.scale**2, 3, padding=1)
        nn.init.zeros_(self.to_rgb.weight)
        nn.init.zeros_(self.to_rgb.bias)
        self.shuffle = nn.PixelShuffle(self.scale)

    def forward(self, out: RenderOutput) -> ImagePair:
        feats = out.feature_map
        if feats.dim() == 3:
            feats = feats[None]
        x = feats.permute(0, 3, 1, 2)  # [B, C_feat, H, W]
        rgb_m11 = x[:, :3] * 2.0 - 1.0
        h = F.leaky_relu(self.conv1(torch.cat([x, rgb_m11], dim=1)), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        delta = self.shuffle(self.to_rgb(h))
        low_up = upsample_rgb(feats[..., :3], self.final_resolution)
        high = torch.clamp(low_up + delta, -1.0, 1.0)
        return ImagePair(high=high, low_upsampled=low_up)


def superresolve(out: RenderOutput, model: SuperResolver) -> ImagePair:
    return model(out)


def real_image_pair(images: torch.Tensor, feature_resolution: int) -> ImagePair:
    """Dual-input pair for real images: the image plus its down/up-sampled copy.

    images: [B, 3, Hf, Wf] in [-1, 1].
    """
    final = images.shape[-1]
    low = F.interpolate(images, size=feature_resolution, mode="area")
    low_up = F.interpolate(low, size=final, mode="bilinear", align_corners=False)
    return ImagePair(high=images, low_upsampled=low_up)
