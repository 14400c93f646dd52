"""Command-line entry points: train, sweep, eval, make-data.

Exit codes: 0 ok, 2 configuration/user error, 3 numerical failure.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from .config import load_config
from .dataset import (
    RealImageSource,
    generate_synthetic_dataset,
    load_dataset,
    load_image_folder,
    save_dataset,
)
from .errors import ConfigurationError, ContractViolation, TrainingDiverged
from .evaluation import ALL_METRICS, REPORT_KEYS, evaluate_run, summary_line
from .metrics import pose_sweep
from .trainer import load_checkpoint, run_training, save_checkpoint

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _fail(message: str, code: int = EXIT_CONFIG):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Pose-unsupervised 3D-aware GAN: training, rendering sweeps, evaluation."""


def _load_records(cfg):
    """Training records for the configured data source."""
    data = cfg.data
    if data.source == "folder":
        # flips happen per batch inside the trainer, not at load time
        return list(load_image_folder(data.path, cfg.model.final_resolution))
    if data.path:
        records, _ = load_dataset(data.path)
        return records
    return generate_synthetic_dataset(
        n_scenes=data.n_scenes,
        views_per_scene=data.views_per_scene,
        pose_prior=cfg.pose_prior(),
        seed=data.seed,
        image_resolution=cfg.model.final_resolution,
        depth_resolution=cfg.model.feature_resolution,
        samples_per_ray=data.depth_samples,
        near=cfg.near,
        far=cfg.far,
        background=cfg.background_value,
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--set", "overrides", multiple=True, help="section.key=value override")
@click.option("--log-every", default=200, show_default=True)
def train(config_path, out_dir, overrides, log_every):
    """Train a run and write ckpt.pt, metrics.jsonl and config.snapshot."""
    try:
        cfg = load_config(config_path, list(overrides))
    except ConfigurationError as exc:
        _fail(str(exc))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.snapshot_yaml())

    try:
        source = RealImageSource(_load_records(cfg))
    except ConfigurationError as exc:
        _fail(str(exc))

    metrics_path = out / "metrics.jsonl"
    try:
        with open(metrics_path, "w") as fh:

            def on_step(metrics):
                fh.write(metrics.to_json_line() + "\n")
                if log_every and metrics.step % log_every == 0:
                    click.echo(
                        f"step {metrics.step}: loss_D={metrics.loss_d:.4f} "
                        f"loss_G={metrics.loss_g:.4f}",
                        err=True,
                    )

            state = run_training(cfg, source, on_step=on_step)
    except TrainingDiverged as exc:
        dump = out / "diverged_dump.pt"
        torch.save(exc.diagnostics, dump)
        _fail(f"{exc} (diagnostics written to {dump})", EXIT_NUMERICAL)
    except ConfigurationError as exc:
        _fail(str(exc))

    save_checkpoint(state, out / "ckpt.pt")
    click.echo(f"trained {cfg.train.steps} steps; run directory: {out}")


def _to_uint8_grid(images: torch.Tensor) -> np.ndarray:
    """[N, 3, H, W] in [-1, 1] -> horizontal strip [H, N*W, 3] uint8."""
    arr = ((images.permute(0, 2, 3, 1).numpy() + 1.0) / 2.0 * 255.0).round()
    arr = arr.clip(0, 255).astype(np.uint8)
    return np.concatenate(list(arr), axis=1)


def _depth_strip(depths: torch.Tensor, near: float, far: float, size: int) -> np.ndarray:
    norm = ((depths - near) / (far - near)).clamp(0.0, 1.0)
    up = torch.nn.functional.interpolate(norm[:, None], size=size, mode="nearest")[:, 0]
    arr = (up.numpy() * 255.0).round().astype(np.uint8)
    strip = np.concatenate(list(arr), axis=1)
    return np.repeat(strip[..., None], 3, axis=-1)


@main.command()
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--yaw", default="-40:40", show_default=True,
              help="sweep range in degrees around the prior's central yaw, lo:hi")
@click.option("--steps", default=5, show_default=True)
@click.option("--count", default=3, show_default=True, help="number of random latents")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def sweep(ckpt_path, yaw, steps, count, seed, out_dir):
    """Render RGB/depth strips across a horizontal pose sweep (EMA generator)."""
    try:
        state = load_checkpoint(ckpt_path)
        lo_hi = yaw.split(":")
        if len(lo_hi) != 2:
            raise ConfigurationError(f"--yaw must look like lo:hi, got {yaw!r}")
        lo, hi = (math.radians(float(v)) + math.pi / 2 for v in lo_hi)
        if steps < 1 or count < 1:
            raise ConfigurationError("--steps and --count must be >= 1")
    except ConfigurationError as exc:
        _fail(str(exc))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = state.synthesizer(use_ema=True)
    tg = torch.Generator().manual_seed(seed)
    final = state.cfg.model.final_resolution

    for i in range(count):
        z = synth.sample_latent(1, tg)[0]
        result = pose_sweep(synth, z, (lo, hi), steps)
        rgb = _to_uint8_grid(result.images)
        depth = _depth_strip(result.depths, state.cfg.near, state.cfg.far, final)
        Image.fromarray(np.concatenate([rgb, depth], axis=0)).save(out / f"sweep_{i}.png")
        # raw depth strip as 16-bit grayscale normalized to [near, far]
        norm = ((result.depths - state.cfg.near) / (state.cfg.far - state.cfg.near)).clamp(0, 1)
        d16 = (norm.numpy() * 65535.0).round().astype(np.uint16)
        Image.fromarray(np.concatenate(list(d16), axis=1)).save(out / f"sweep_{i}_depth16.png")
        meta = {
            "yaws_rad": [float(v) for v in result.yaws],
            "pitch_rad": math.pi / 2,
            "steps": steps,
        }
        (out / f"sweep_{i}.json").write_text(json.dumps(meta, indent=2))
    click.echo(f"wrote {count} sweep strips to {out}")


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--metrics", "metrics_csv", default=",".join(ALL_METRICS), show_default=True)
@click.option("--out", "out_dir", default=None, type=click.Path(),
              help="report directory (default: alongside the checkpoint)")
def cmd_eval(ckpt_path, data_path, metrics_csv, out_dir):
    """Evaluate a checkpoint against a dataset directory or image folder."""
    try:
        state = load_checkpoint(ckpt_path)
        data_path = Path(data_path)
        if (data_path / "manifest.json").exists():
            records, _ = load_dataset(data_path)
        else:
            records = list(
                load_image_folder(data_path, state.cfg.model.final_resolution)
            )
        requested = [m.strip() for m in metrics_csv.split(",") if m.strip()]
        report, refusals = evaluate_run(state, records, requested)
    except (ConfigurationError, ContractViolation) as exc:
        _fail(str(exc))

    for name, reason in refusals.items():
        click.echo(f"refused {name}: {reason}", err=True)

    out = Path(out_dir) if out_dir else Path(ckpt_path).parent
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "metrics_report.json"
    report_path.write_text(json.dumps({k: report[k] for k in REPORT_KEYS}, indent=2))
    click.echo(summary_line(report))
    click.echo(f"report written to {report_path}", err=True)


@main.command("make-data")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--scenes", default=None, type=int, help="override data.n_scenes")
@click.option("--views", default=None, type=int, help="override data.views_per_scene")
@click.option("--seed", default=None, type=int, help="override data.seed")
@click.option("--force", is_flag=True, help="write into a non-empty directory")
def make_data(config_path, out_dir, scenes, views, seed, force):
    """Materialize the synthetic dataset directory for a config."""
    try:
        overrides = []
        if scenes is not None:
            overrides.append(f"data.n_scenes={scenes}")
        if views is not None:
            overrides.append(f"data.views_per_scene={views}")
        if seed is not None:
            overrides.append(f"data.seed={seed}")
        cfg = load_config(config_path, overrides)

        out = Path(out_dir)
        if out.exists() and any(out.iterdir()) and not force:
            raise ConfigurationError(
                f"output directory {out} is not empty; pass --force to overwrite"
            )
        records = _make_synthetic(cfg)
        manifest = {
            "seed": cfg.data.seed,
            "pose_prior": cfg.data.pose_prior,
            "n_scenes": cfg.data.n_scenes,
            "views_per_scene": cfg.data.views_per_scene,
            "image_resolution": cfg.model.final_resolution,
            "depth_resolution": cfg.model.feature_resolution,
            "samples_per_ray": cfg.data.depth_samples,
            "near": cfg.near,
            "far": cfg.far,
            "background": cfg.data.background,
        }
        save_dataset(records, out, manifest)
    except ConfigurationError as exc:
        _fail(str(exc))
    click.echo(f"wrote {len(records)} records to {out}")


def _make_synthetic(cfg):
    return generate_synthetic_dataset(
        n_scenes=cfg.data.n_scenes,
        views_per_scene=cfg.data.views_per_scene,
        pose_prior=cfg.pose_prior(),
        seed=cfg.data.seed,
        image_resolution=cfg.model.final_resolution,
        depth_resolution=cfg.model.feature_resolution,
        samples_per_ray=cfg.data.depth_samples,
        near=cfg.near,
        far=cfg.far,
        background=cfg.background_value,
    )


if __name__ == "__main__":
    main()
