"""Synthetic multi-view data with known poses/depths, and image-folder ingestion.

The synthetic scenes are soft Gaussian-falloff ellipsoids rendered with the
standard emission-absorption formula evaluated on the closed-form density.
The compositing here is an independent numpy implementation, kept separate
from the torch renderer on purpose so the two can be cross-checked.

Ground-truth poses and depths live only on DatasetRecord, the evaluation
record type. Training consumes TrainBatch, which structurally cannot carry
them.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError
from .geometry import CameraPose, PoseDistribution, generate_rays, sample_pose

DENSITY_AMPLITUDE = 40.0
MAX_PRIMITIVES = 5


@dataclass
class Ellipsoid:
    center: np.ndarray  # (3,)
    radii: np.ndarray  # (3,), Gaussian-falloff scales per axis
    rgb: np.ndarray  # (3,) in [0, 1]
    amplitude: float = DENSITY_AMPLITUDE


@dataclass
class SyntheticScene:
    primitives: list[Ellipsoid]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if len(self.primitives) > MAX_PRIMITIVES:
            raise ConfigurationError(
                f"scenes hold at most {MAX_PRIMITIVES} primitives, got {len(self.primitives)}"
            )


def scene_density(scene: SyntheticScene, points: np.ndarray):
    """Closed-form density and color at points [K, 3] -> (sigma [K], rgb [K, 3])."""
    k = points.shape[0]
    sigma = np.zeros(k)
    weighted_rgb = np.zeros((k, 3))
    for prim in scene.primitives:
        q = (((points - prim.center) / prim.radii) ** 2).sum(axis=1)
        s = prim.amplitude * np.exp(-0.5 * q)
        sigma += s
        weighted_rgb += s[:, None] * prim.rgb
    rgb = weighted_rgb / np.maximum(sigma, 1e-12)[:, None]
    rgb[sigma < 1e-12] = 0.0
    return sigma, rgb


def analytic_composite(
    densities: np.ndarray,
    values: np.ndarray,
    t_vals: np.ndarray,
    background: np.ndarray,
    last_delta: float,
    empty_depth: float | None = None,
):
    """Numpy emission-absorption compositing; mirrors the renderer's contract.

    densities [..., S], values [..., S, C], t_vals [..., S] or [S].
    """
    t_vals = np.broadcast_to(t_vals, densities.shape)
    deltas = np.diff(t_vals, axis=-1)
    if (deltas <= 0).any():
        raise ConfigurationError("t_vals must be strictly increasing")
    deltas = np.concatenate([deltas, np.full_like(t_vals[..., :1], last_delta)], axis=-1)

    alpha = 1.0 - np.exp(-densities * deltas)
    ones = np.ones_like(alpha[..., :1])
    trans = np.cumprod(np.concatenate([ones, 1.0 - alpha], axis=-1), axis=-1)
    weights = trans[..., :-1] * alpha
    trans_final = trans[..., -1]

    opacity = 1.0 - trans_final
    value = (weights[..., None] * values).sum(axis=-2) + trans_final[..., None] * background
    if empty_depth is None:
        far = t_vals[..., -1] + last_delta
    else:
        far = np.full_like(opacity, empty_depth)
    depth = np.where(
        opacity > 1e-6, (weights * t_vals).sum(axis=-1) / np.maximum(opacity, 1e-6), far
    )
    return value, depth, opacity


def render_scene(
    scene: SyntheticScene,
    pose: CameraPose,
    resolution: int,
    samples_per_ray: int = 64,
    near: float | None = None,
    far: float | None = None,
):
    """Analytic render -> (rgb [H, W, 3] in [0, 1], depth [H, W], opacity [H, W])."""
    rays = generate_rays(pose, resolution, near=near, far=far, dtype=torch.float64)
    origins = rays.origins.numpy()
    dirs = rays.directions.numpy()
    near, far = rays.near, rays.far

    step = (far - near) / samples_per_ray
    t_vals = near + (np.arange(samples_per_ray) + 0.5) * step  # midpoints, deterministic
    points = origins[..., None, :] + t_vals[:, None] * dirs[..., None, :]
    sigma, rgb = scene_density(scene, points.reshape(-1, 3))
    shape = (resolution, resolution, samples_per_ray)
    value, depth, opacity = analytic_composite(
        sigma.reshape(shape),
        rgb.reshape(*shape, 3),
        t_vals,
        scene.background,
        step,
        empty_depth=far,
    )
    return value, depth, opacity


@dataclass
class DatasetRecord:
    """One image with its evaluation-only ground truth channels."""

    image: torch.Tensor  # [3, H, W] in [-1, 1]
    gt_pose: Optional[CameraPose] = None
    gt_depth: Optional[np.ndarray] = None  # [h, w] scene units


@dataclass
class TrainBatch:
    """What the training loop is allowed to see: pixels, nothing else."""

    images: torch.Tensor  # [B, 3, H, W] in [-1, 1]


class RealImageSource:
    """Samples training batches (images only) from a record set."""

    def __init__(self, records: Sequence[DatasetRecord]):
        if not records:
            raise ConfigurationError("empty dataset")
        self.images = torch.stack([r.image for r in records])

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, batch_size: int, rng: np.random.Generator) -> TrainBatch:
        idx = rng.integers(0, len(self), size=batch_size)
        return TrainBatch(images=self.images[torch.from_numpy(idx)])


def random_scene(rng: np.random.Generator, background: float = 0.0) -> SyntheticScene:
    n = int(rng.integers(1, MAX_PRIMITIVES + 1))
    prims = []
    for _ in range(n):
        prims.append(
            Ellipsoid(
                center=rng.uniform(-0.45, 0.45, size=3),
                radii=rng.uniform(0.08, 0.22, size=3),
                rgb=rng.uniform(0.15, 1.0, size=3),
            )
        )
    return SyntheticScene(primitives=prims, background=np.full(3, float(background)))


def generate_synthetic_dataset(
    n_scenes: int,
    views_per_scene: int,
    pose_prior: PoseDistribution,
    seed: int,
    image_resolution: int = 32,
    depth_resolution: int = 16,
    samples_per_ray: int = 64,
    near: float | None = None,
    far: float | None = None,
    background: float = 0.0,
) -> list[DatasetRecord]:
    """Deterministic multi-view dataset of random ellipsoid scenes."""
    if n_scenes < 1 or views_per_scene < 1:
        raise ConfigurationError("n_scenes and views_per_scene must be >= 1")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_scenes):
        scene = random_scene(rng, background=background)
        for _ in range(views_per_scene):
            pose = sample_pose(pose_prior, rng)
            rgb, _, _ = render_scene(
                scene, pose, image_resolution, samples_per_ray, near=near, far=far
            )
            _, depth, _ = render_scene(
                scene, pose, depth_resolution, samples_per_ray, near=near, far=far
            )
            image = torch.from_numpy(rgb * 2.0 - 1.0).float().permute(2, 0, 1)
            records.append(DatasetRecord(image=image, gt_pose=pose, gt_depth=depth))
    return records


# ----------------------------------------------------------------------------
# image folder ingestion


def load_image_folder(
    path,
    resolution: int,
    flip_augment: bool = False,
    rng: np.random.Generator | None = None,
) -> Iterator[DatasetRecord]:
    """Stream center-cropped, resized records from a folder of images.

    Files are visited in sorted order; unreadable files are skipped with a
    warning. Horizontal flips are applied with probability 0.5 when enabled.
    """
    path = Path(path)
    if not path.is_dir():
        raise ConfigurationError(f"not a directory: {path}")
    if flip_augment and rng is None:
        rng = np.random.default_rng(0)

    yielded = 0
    for file in sorted(p for p in path.iterdir() if p.is_file()):
        try:
            with Image.open(file) as img:
                img = img.convert("RGB")
        except (UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping unreadable image {file}: {exc}")
            continue
        side = min(img.size)
        left = (img.width - side) // 2
        top = (img.height - side) // 2
        img = img.crop((left, top, left + side, top + side))
        img = img.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        if flip_augment and rng.random() < 0.5:
            arr = arr[:, ::-1].copy()
        tensor = torch.from_numpy(arr * 2.0 - 1.0).permute(2, 0, 1)
        yielded += 1
        yield DatasetRecord(image=tensor)
    if yielded == 0:
        raise ConfigurationError(f"no decodable images in {path}")


# ----------------------------------------------------------------------------
# persistence


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = ((image.permute(1, 2, 0).numpy() + 1.0) / 2.0 * 255.0).round()
    return arr.clip(0, 255).astype(np.uint8)


def _depth_to_uint16(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    norm = np.clip((depth - near) / (far - near), 0.0, 1.0)
    return (norm * 65535.0).round().astype(np.uint16)


def save_dataset(records: Sequence[DatasetRecord], out_dir, manifest: dict) -> Path:
    """Persist records as images/*.png, depth/*.png (16-bit), poses.csv, manifest.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    has_gt = records[0].gt_depth is not None
    if has_gt:
        (out / "depth").mkdir(exist_ok=True)
    near, far = manifest["near"], manifest["far"]

    with open(out / "poses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "pitch", "yaw", "radius", "fov"])
        for i, rec in enumerate(records):
            Image.fromarray(_to_uint8(rec.image)).save(out / "images" / f"{i:05d}.png")
            if rec.gt_depth is not None:
                img16 = Image.fromarray(_depth_to_uint16(rec.gt_depth, near, far))
                img16.save(out / "depth" / f"{i:05d}.png")
            if rec.gt_pose is not None:
                p = rec.gt_pose
                writer.writerow([i, repr(p.pitch), repr(p.yaw), repr(p.radius), repr(p.fov)])

    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def load_dataset(path) -> tuple[list[DatasetRecord], dict]:
    """Load a persisted synthetic dataset directory."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"{root} has no manifest.json; not a synthetic dataset dir")
    manifest = json.loads(manifest_path.read_text())
    near, far = manifest["near"], manifest["far"]

    poses: dict[int, CameraPose] = {}
    poses_csv = root / "poses.csv"
    if poses_csv.exists():
        with open(poses_csv) as fh:
            for row in csv.DictReader(fh):
                poses[int(row["index"])] = CameraPose(
                    pitch=float(row["pitch"]),
                    yaw=float(row["yaw"]),
                    radius=float(row["radius"]),
                    fov=float(row["fov"]),
                )

    records = []
    for i, file in enumerate(sorted((root / "images").iterdir())):
        with Image.open(file) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        image = torch.from_numpy(arr * 2.0 - 1.0).permute(2, 0, 1)
        depth = None
        depth_file = root / "depth" / file.name
        if depth_file.exists():
            with Image.open(depth_file) as dimg:
                d16 = np.asarray(dimg, dtype=np.float64) / 65535.0
            depth = d16 * (far - near) + near
        records.append(DatasetRecord(image=image, gt_pose=poses.get(i), gt_depth=depth))
    return records, manifest
