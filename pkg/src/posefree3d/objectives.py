"""Training objectives.

Non-saturating GAN loss with R1 regularization plus, per variant, an
auxiliary term computed on fake images only:

  * regression            ||pose_estimate - rendering_pose|| (l1 or l2)
  * implicit              InfoNCE over pose embeddings of same-pose pairs
  * regression+implicit   the sum of both

The compressed two-player objective maps onto the standard split: D minimizes
softplus(-D(real)) + softplus(D(fake)) + (lambda_r1 / 2) * R1, G minimizes
softplus(-D(fake)); the auxiliary terms are applied on both sides, so they
shape the generator and the discriminator together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .discriminator import Discriminator, KIND_POSE_CONDITIONED
from .errors import ConfigurationError, ContractViolation
from .geometry import CameraPose, poses_to_tensor
from .renderer import RenderConfig, render_batch
from .superres import ImagePair, SuperResolver, cat_pairs

COS_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_r1: float = 1.0
    lambda_pose: float = 1.0  # weight shared by both auxiliary terms
    tau: float = 0.25
    pose_norm: str = "l2"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"temperature tau must be > 0, got {self.tau}")
        if self.lambda_r1 < 0 or self.lambda_pose < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.pose_norm not in ("l1", "l2"):
            raise ConfigurationError(f"pose_norm must be 'l1' or 'l2', got {self.pose_norm!r}")


def softplus_gan_f(u: torch.Tensor) -> torch.Tensor:
    """f(u) = -log(1 + exp(-u)), evaluated in the stable log1p form."""
    return -F.softplus(-u)


def r1_penalty(disc, real_pair: ImagePair, condition_pose: torch.Tensor | None = None) -> torch.Tensor:
    """Squared l2 norm of d logit / d input pixels, averaged over the batch.

    Both members of the pair are inputs to the trunk, so the penalty covers
    both gradients. Differentiable (create_graph) for use inside loss terms.
    """
    high = real_pair.high.detach().requires_grad_(True)
    low = real_pair.low_upsampled.detach().requires_grad_(True)
    out = disc(ImagePair(high, low), condition_pose)
    total_logit = out.logit.sum()
    if not total_logit.requires_grad:
        return high.new_zeros(())  # constant function of its input
    grads = torch.autograd.grad(
        total_logit, (high, low), create_graph=True, allow_unused=True
    )
    batch = high.shape[0]
    total = high.new_zeros(batch)
    for g in grads:
        if g is not None:
            total = total + g.reshape(batch, -1).pow(2).sum(dim=1)
    return total.mean()


def pose_regression_loss(
    pose_estimate: torch.Tensor, pose_target: torch.Tensor, norm: str = "l2"
) -> torch.Tensor:
    """||estimate - target|| per sample under the chosen norm, batch-averaged."""
    diff = pose_estimate - pose_target
    if norm == "l1":
        per_sample = diff.abs().sum(dim=-1)
    elif norm == "l2":
        per_sample = diff.pow(2).sum(dim=-1).sqrt()
    else:
        raise ConfigurationError(f"unknown pose norm {norm!r}")
    return per_sample.mean()


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu = u.norm(dim=-1).clamp(min=COS_EPS)
    nv = v.norm(dim=-1).clamp(min=COS_EPS)
    return (u * v).sum(dim=-1) / (nu * nv)


def info_nce(
    v_anchor: torch.Tensor,
    v_pos: torch.Tensor,
    v_negs: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Temperature-scaled softmax classification of the positive among negatives.

    v_anchor, v_pos: [m] or [N, m]; v_negs: [S, m] or [N, S, m]. Returns a
    scalar for the single-anchor form, [N] otherwise. Computed with
    log-sum-exp stabilization.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature tau must be > 0, got {tau}")
    pos = cosine_similarity(v_anchor, v_pos) / tau  # [...]
    negs = cosine_similarity(v_anchor.unsqueeze(-2), v_negs) / tau  # [..., S]
    logits = torch.cat([pos.unsqueeze(-1), negs], dim=-1)
    return torch.logsumexp(logits, dim=-1) - pos


def paired_info_nce(embeddings: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-anchor InfoNCE over a [2N, m] embedding block.

    Rows 0..N-1 are anchors, rows N..2N-1 the matching positives; the
    negatives of anchor i are every other row except i itself and N+i, i.e.
    both renders of every other pose (S = 2(N-1)).
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature tau must be > 0, got {tau}")
    two_n = embeddings.shape[0]
    if two_n % 2 or two_n < 4:
        raise ContractViolation("paired embeddings require N >= 2 anchor/positive pairs")
    n = two_n // 2
    anchors = embeddings[:n]
    norms = embeddings.norm(dim=-1).clamp(min=COS_EPS)
    sims = (anchors @ embeddings.T) / (norms[:n, None] * norms[None, :])
    logits = sims / tau  # [N, 2N]
    self_mask = torch.zeros_like(logits, dtype=torch.bool)
    self_mask[torch.arange(n), torch.arange(n)] = True
    logits = logits.masked_fill(self_mask, float("-inf"))
    pos = logits[torch.arange(n), torch.arange(n) + n]
    return torch.logsumexp(logits, dim=-1) - pos


@dataclass
class ContrastBatch:
    """Fake images rendered as same-pose anchor/positive pairs.

    This pairing is also the fake batch for the non-contrastive variants, so
    every variant trains on an identically constructed (and identically
    random) set of renders.
    """

    poses: list[CameraPose]
    anchor_z: torch.Tensor  # [N, n_z]
    positive_z: torch.Tensor  # [N, n_z]
    anchor_images: ImagePair
    positive_images: ImagePair

    def __post_init__(self):
        n = len(self.poses)
        if n < 2:
            raise ConfigurationError(f"contrast batches need N >= 2 poses, got {n}")
        for i in range(n):
            for j in range(i + 1, n):
                a, b = self.poses[i], self.poses[j]
                if abs(a.pitch - b.pitch) < 1e-4 and abs(a.yaw - b.yaw) < 1e-4:
                    raise ContractViolation(
                        f"poses {i} and {j} coincide; negatives must differ in pose"
                    )
        if bool((self.anchor_z == self.positive_z).all(dim=-1).any()):
            raise ContractViolation("anchor and positive latents must differ per pair")

    @property
    def n_anchors(self) -> int:
        return len(self.poses)

    @property
    def n_negatives(self) -> int:
        return 2 * (len(self.poses) - 1)

    def all_images(self) -> ImagePair:
        return cat_pairs(self.anchor_images, self.positive_images)

    def pose_targets(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Rendering poses of all_images(), [2N, 2]."""
        return poses_to_tensor(list(self.poses) + list(self.poses), dtype=dtype)

    def detach(self) -> "ContrastBatch":
        return ContrastBatch(
            poses=self.poses,
            anchor_z=self.anchor_z,
            positive_z=self.positive_z,
            anchor_images=self.anchor_images.detach(),
            positive_images=self.positive_images.detach(),
        )


def build_contrast_batch(
    gen,
    sr: SuperResolver,
    poses: Sequence[CameraPose],
    cfg: RenderConfig,
    latent_rng: torch.Generator | None = None,
    render_rng: torch.Generator | None = None,
) -> ContrastBatch:
    """Render anchors at the given poses and positives at the same poses with
    fresh latents."""
    n = len(poses)
    if n < 2:
        raise ConfigurationError(f"contrast batches need N >= 2 poses, got {n}")
    z_a = gen.sample_latent(n, latent_rng)
    z_p = gen.sample_latent(n, latent_rng)
    out = render_batch(gen, torch.cat([z_a, z_p]), list(poses) * 2, cfg, rng=render_rng)
    pairs = sr(out)
    anchor = ImagePair(pairs.high[:n], pairs.low_upsampled[:n])
    positive = ImagePair(pairs.high[n:], pairs.low_upsampled[n:])
    return ContrastBatch(
        poses=list(poses),
        anchor_z=z_a,
        positive_z=z_p,
        anchor_images=anchor,
        positive_images=positive,
    )


def contrastive_loss(batch: ContrastBatch, disc: Discriminator, tau: float) -> torch.Tensor:
    """Mean InfoNCE over the batch anchors, embeddings taken from disc."""
    if not disc.variant.has_embedding_head:
        raise ContractViolation(
            f"variant {disc.variant.kind!r} has no embedding head for contrastive loss"
        )
    out = disc(batch.all_images())
    return paired_info_nce(out.embedding, tau).mean()


# ----------------------------------------------------------------------------
# objective assembly


def _aux_terms(disc: Discriminator, weights: LossWeights, out, fake: ContrastBatch):
    """Auxiliary losses of the active heads, computed on fake outputs."""
    parts = {}
    total = None
    if disc.variant.has_pose_head:
        targets = fake.pose_targets(dtype=out.pose_estimate.dtype)
        pl = pose_regression_loss(out.pose_estimate, targets, weights.pose_norm)
        parts["pose_loss"] = pl
        total = pl if total is None else total + pl
    if disc.variant.has_embedding_head:
        nce = paired_info_nce(out.embedding, weights.tau).mean()
        parts["info_nce"] = nce
        total = nce if total is None else total + nce
    return total, parts


def discriminator_loss(
    disc: Discriminator,
    weights: LossWeights,
    real_pair: ImagePair,
    fake: ContrastBatch,
    real_condition: torch.Tensor | None = None,
    apply_r1: bool = True,
    r1_scale: float = 1.0,
):
    """Discriminator-side loss; fake images are detached so only D learns here."""
    conditioned = disc.variant.kind == KIND_POSE_CONDITIONED
    fake_detached = fake.detach()
    fake_cond = fake_detached.pose_targets() if conditioned else None
    real_cond = real_condition if conditioned else None

    real_out = disc(real_pair, real_cond)
    fake_out = disc(fake_detached.all_images(), fake_cond)
    loss = F.softplus(-real_out.logit).mean() + F.softplus(fake_out.logit).mean()

    metrics = {
        "real_logit_mean": real_out.logit.mean(),
        "fake_logit_mean": fake_out.logit.mean(),
        "r1": real_pair.high.new_zeros(()),
    }
    if apply_r1 and weights.lambda_r1 > 0:
        pen = r1_penalty(disc, real_pair, real_cond)
        loss = loss + 0.5 * weights.lambda_r1 * r1_scale * pen
        metrics["r1"] = pen

    aux, parts = _aux_terms(disc, weights, fake_out, fake_detached)
    if aux is not None and weights.lambda_pose > 0:
        loss = loss + weights.lambda_pose * aux
    metrics.update(parts)
    return loss, metrics


def generator_loss(
    disc: Discriminator,
    weights: LossWeights,
    fake: ContrastBatch,
):
    """Generator-side loss on attached fakes; the caller must step G only."""
    conditioned = disc.variant.kind == KIND_POSE_CONDITIONED
    fake_cond = fake.pose_targets() if conditioned else None
    out = disc(fake.all_images(), fake_cond)
    loss = F.softplus(-out.logit).mean()
    aux, parts = _aux_terms(disc, weights, out, fake)
    if aux is not None and weights.lambda_pose > 0:
        loss = loss + weights.lambda_pose * aux
    return loss, parts


def total_objective(
    disc: Discriminator,
    weights: LossWeights,
    real_pair: ImagePair,
    fake: ContrastBatch,
    real_condition: torch.Tensor | None = None,
    apply_r1: bool = True,
    r1_scale: float = 1.0,
):
    """Both players' losses for the current parameters, plus scalar metrics.

    The auxiliary term appears in both losses: through detached fakes on the
    discriminator side and through the render graph on the generator side.
    """
    loss_d, metrics = discriminator_loss(
        disc, weights, real_pair, fake,
        real_condition=real_condition, apply_r1=apply_r1, r1_scale=r1_scale,
    )
    loss_g, g_parts = generator_loss(disc, weights, fake)
    metrics = {k: float(v.detach()) for k, v in metrics.items()}
    for key in ("pose_loss", "info_nce"):
        if key in g_parts:
            metrics[key] = float(g_parts[key].detach())
        elif key not in metrics:
            metrics[key] = 0.0
    return loss_d, loss_g, metrics
