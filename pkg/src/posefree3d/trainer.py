"""Alternating D/G optimization, EMA of generator weights, checkpoints.

Each step: build the real pair (with p=0.5 horizontal flips), render the fake
pair batch, update D (GAN + lazy R1 + auxiliary term on detached fakes), then
update G (GAN + auxiliary term through the render graph) under the freshly
updated D. All randomness flows through generators owned by the state, so a
seed fixes the entire metric stream.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import RunConfig, from_dict
from .dataset import RealImageSource, TrainBatch
from .discriminator import Discriminator, DiscVariant, KIND_POSE_CONDITIONED
from .errors import ConfigurationError, TrainingDiverged
from .generator import TriPlaneGenerator
from .geometry import CameraPose, poses_to_tensor, sample_distinct_poses, sample_pose
from .objectives import (
    ContrastBatch,
    build_contrast_batch,
    discriminator_loss,
    generator_loss,
)
from .renderer import RenderOutput, render_batch
from .superres import ImagePair, SuperResolver, real_image_pair

CHECKPOINT_VERSION = "posefree3d-ckpt-v1"

METRIC_KEYS = (
    "step", "loss_D", "loss_G", "r1", "pose_loss", "info_nce",
    "real_logit_mean", "fake_logit_mean",
)


@dataclass
class StepMetrics:
    step: int
    loss_d: float
    loss_g: float
    r1: float
    pose_loss: float
    info_nce: float
    real_logit_mean: float
    fake_logit_mean: float

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "loss_D": self.loss_d,
            "loss_G": self.loss_g,
            "r1": self.r1,
            "pose_loss": self.pose_loss,
            "info_nce": self.info_nce,
            "real_logit_mean": self.real_logit_mean,
            "fake_logit_mean": self.fake_logit_mean,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_record())


class TrainState:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.variant = cfg.variant()
        self.weights = cfg.weights()
        self.render_cfg = cfg.render_config(stratified=True)
        self.pose_dist = cfg.pose_prior()
        self.step = 0

        torch.manual_seed(cfg.train.seed)
        m = cfg.model
        self.gen = TriPlaneGenerator(
            n_z=m.n_z,
            n_w=m.n_w,
            plane_resolution=m.plane_resolution,
            plane_channels=m.plane_channels,
            feature_channels=m.feature_channels,
        )
        self.sr = SuperResolver(
            feature_channels=m.feature_channels,
            feature_resolution=m.feature_resolution,
            final_resolution=m.final_resolution,
        )
        self.disc = Discriminator(self.variant, resolution=m.final_resolution)

        self.opt_g = torch.optim.Adam(
            list(self.gen.parameters()) + list(self.sr.parameters()),
            lr=cfg.train.lr_g,
            betas=(0.0, 0.99),
        )
        self.opt_d = torch.optim.Adam(
            self.disc.parameters(), lr=cfg.train.lr_d, betas=(0.0, 0.99)
        )
        self.ema = {
            name: p.detach().clone()
            for name, p in self._ema_named_params()
        }

        seeds = np.random.SeedSequence(cfg.train.seed).generate_state(5)
        self.latent_rng = torch.Generator().manual_seed(int(seeds[0]))
        self.render_rng = torch.Generator().manual_seed(int(seeds[1]))
        self.pose_rng = np.random.default_rng(int(seeds[2]))
        self.flip_rng = np.random.default_rng(int(seeds[3]))
        self.data_rng = np.random.default_rng(int(seeds[4]))

    def _ema_named_params(self):
        for name, p in self.gen.named_parameters():
            yield f"gen.{name}", p
        for name, p in self.sr.named_parameters():
            yield f"sr.{name}", p

    def ema_update(self):
        decay = self.cfg.train.ema_decay
        with torch.no_grad():
            for name, p in self._ema_named_params():
                self.ema[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)

    def ema_modules(self) -> tuple[TriPlaneGenerator, SuperResolver]:
        """Deep copies of (generator, superres) carrying the EMA weights."""
        gen = copy.deepcopy(self.gen)
        sr = copy.deepcopy(self.sr)
        with torch.no_grad():
            for name, p in gen.named_parameters():
                p.copy_(self.ema[f"gen.{name}"])
            for name, p in sr.named_parameters():
                p.copy_(self.ema[f"sr.{name}"])
        gen.eval()
        sr.eval()
        return gen, sr

    def synthesizer(self, use_ema: bool = True) -> "Synthesizer":
        if use_ema:
            gen, sr = self.ema_modules()
        else:
            gen, sr = self.gen, self.sr
        return Synthesizer(gen, sr, self.cfg)


class Synthesizer:
    """Evaluation-time image synthesis bundle (deterministic rendering)."""

    def __init__(self, gen: TriPlaneGenerator, sr: SuperResolver, cfg: RunConfig):
        self.gen = gen
        self.sr = sr
        self.cfg = cfg
        self.render_cfg = cfg.render_config(stratified=False)

    def sample_latent(self, n: int, rng: torch.Generator | None = None) -> torch.Tensor:
        return self.gen.sample_latent(n, rng)

    def render(self, z: torch.Tensor, poses: Sequence[CameraPose]):
        out = render_batch(self.gen, z, list(poses), self.render_cfg)
        return out, self.sr(out)

    def images(self, z: torch.Tensor, poses: Sequence[CameraPose]) -> ImagePair:
        return self.render(z, poses)[1]

    def pose_template(self, pitch: float, yaw: float) -> CameraPose:
        return CameraPose(
            pitch=pitch, yaw=yaw, radius=self.cfg.data.radius, fov=self.cfg.data.fov
        )


def init_state(cfg: RunConfig) -> TrainState:
    return TrainState(cfg)


def _flip_half(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    mask = rng.random(images.shape[0]) < 0.5
    if not mask.any():
        return images
    flipped = images.clone()
    idx = torch.from_numpy(np.nonzero(mask)[0])
    flipped[idx] = torch.flip(flipped[idx], dims=[-1])
    return flipped


def _check_finite(name: str, value: torch.Tensor, state: TrainState, batch: TrainBatch, fake):
    if bool(torch.isfinite(value).all()):
        return
    raise TrainingDiverged(
        f"{name} is non-finite at step {state.step}",
        diagnostics={
            "step": state.step,
            "loss": value.detach(),
            "real_images": batch.images.detach(),
            "poses": poses_to_tensor(fake.poses),
            "anchor_z": fake.anchor_z.detach(),
            "positive_z": fake.positive_z.detach(),
        },
    )


def train_step(state: TrainState, real_batch: TrainBatch) -> StepMetrics:
    """One discriminator update followed by one generator update."""
    cfg = state.cfg
    if real_batch.images.shape[0] == 0:
        raise ConfigurationError("empty real batch")

    if cfg.data.flip_augment:
        images = _flip_half(real_batch.images, state.flip_rng)
    else:
        images = real_batch.images
    real_pair = real_image_pair(images, cfg.model.feature_resolution)

    n_pairs = cfg.train.batch_size // 2
    poses = sample_distinct_poses(state.pose_dist, n_pairs, state.pose_rng)
    fake = build_contrast_batch(
        state.gen, state.sr, poses, state.render_cfg,
        latent_rng=state.latent_rng, render_rng=state.render_rng,
    )

    real_condition = None
    if state.variant.kind == KIND_POSE_CONDITIONED:
        # no ground-truth poses exist in this setting; condition reals on
        # prior samples as a stand-in
        cond = [sample_pose(state.pose_dist, state.pose_rng) for _ in range(images.shape[0])]
        real_condition = poses_to_tensor(cond)

    apply_r1 = state.step % cfg.train.r1_every == 0
    loss_d, d_metrics = discriminator_loss(
        state.disc, state.weights, real_pair, fake,
        real_condition=real_condition,
        apply_r1=apply_r1,
        r1_scale=float(cfg.train.r1_every),
    )
    _check_finite("loss_D", loss_d.detach(), state, real_batch, fake)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    loss_g, g_parts = generator_loss(state.disc, state.weights, fake)
    _check_finite("loss_G", loss_g.detach(), state, real_batch, fake)
    state.opt_g.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)  # aux terms also reach D; discard
    loss_g.backward()
    state.opt_g.step()
    state.ema_update()

    def _metric(d, key):
        v = d.get(key)
        return float(v.detach()) if v is not None else 0.0

    metrics = StepMetrics(
        step=state.step,
        loss_d=float(loss_d.detach()),
        loss_g=float(loss_g.detach()),
        r1=_metric(d_metrics, "r1"),
        pose_loss=_metric(d_metrics, "pose_loss"),
        info_nce=_metric(d_metrics, "info_nce"),
        real_logit_mean=_metric(d_metrics, "real_logit_mean"),
        fake_logit_mean=_metric(d_metrics, "fake_logit_mean"),
    )
    state.step += 1
    return metrics


def run_training(
    cfg: RunConfig,
    source: RealImageSource,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> TrainState:
    state = init_state(cfg)
    for _ in range(cfg.train.steps):
        batch = source.sample(cfg.train.batch_size, state.data_rng)
        metrics = train_step(state, batch)
        if on_step is not None:
            on_step(metrics)
    return state


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.cfg.to_dict(),
        "params": {
            "gen": state.gen.state_dict(),
            "sr": state.sr.state_dict(),
            "disc": state.disc.state_dict(),
        },
        "ema": state.ema,
        "rng": {
            "latent": state.latent_rng.get_state(),
            "render": state.render_rng.get_state(),
            "pose": state.pose_rng.bit_generator.state,
            "flip": state.flip_rng.bit_generator.state,
            "data": state.data_rng.bit_generator.state,
        },
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected_variant: DiscVariant | None = None) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"checkpoint version {version!r} does not match {CHECKPOINT_VERSION!r}; refusing to load"
        )
    cfg = from_dict(payload["config"])
    if expected_variant is not None and expected_variant.kind != cfg.model.variant:
        raise ConfigurationError(
            f"checkpoint holds a {cfg.model.variant!r} discriminator, "
            f"but a {expected_variant.kind!r} run was requested"
        )

    state = TrainState(cfg)
    state.step = payload["step"]
    state.gen.load_state_dict(payload["params"]["gen"])
    state.sr.load_state_dict(payload["params"]["sr"])
    state.disc.load_state_dict(payload["params"]["disc"])
    state.ema = payload["ema"]
    state.latent_rng.set_state(payload["rng"]["latent"])
    state.render_rng.set_state(payload["rng"]["render"])
    state.pose_rng = np.random.default_rng()
    state.pose_rng.bit_generator.state = payload["rng"]["pose"]
    state.flip_rng = np.random.default_rng()
    state.flip_rng.bit_generator.state = payload["rng"]["flip"]
    state.data_rng = np.random.default_rng()
    state.data_rng.bit_generator.state = payload["rng"]["data"]
    return state
