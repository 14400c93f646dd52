"""Pose-unsupervised 3D-aware GAN training at desk scale.

A tri-plane generative radiance field trained adversarially without camera
pose labels, comparing pose-conditioned, pose-regressing and contrastive
implicit-pose-embedding discriminators.
"""

__version__ = "0.1.0"

from .discriminator import DiscVariant
from .geometry import CameraPose, PoseDistribution
from .renderer import RenderConfig

__all__ = ["CameraPose", "DiscVariant", "PoseDistribution", "RenderConfig", "__version__"]
