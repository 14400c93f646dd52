import numpy as np
import pytest
import torch

from posefree3d.config import from_dict


def tiny_config(**over):
    """A fast, small run config for tests; keyword args patch section dicts."""
    raw = {
        "model": {
            "variant": "implicit",
            "m": 8,
            "n_z": 8,
            "n_w": 8,
            "plane_resolution": 8,
            "plane_channels": 4,
            "feature_channels": 4,
            "feature_resolution": 8,
            "final_resolution": 16,
            "samples_per_ray": 8,
        },
        "loss": {},
        "train": {"batch_size": 4, "steps": 3, "seed": 11},
        "data": {
            "pose_prior": "cub",
            "fov": 0.6,
            "n_scenes": 2,
            "views_per_scene": 2,
            "seed": 5,
            "depth_samples": 16,
        },
        "eval": {"n_samples": 12, "n_poses": 3, "n_latents": 2, "k": 2, "seed": 13},
    }
    for section, patch in over.items():
        raw[section].update(patch)
    return from_dict(raw)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def numeric_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar fn w.r.t. every element of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grad_close(analytic: torch.Tensor, numeric: torch.Tensor, rel: float, abs_tol: float = 1e-8):
    err = (analytic - numeric).abs()
    bound = rel * numeric.abs() + abs_tol
    worst = (err - bound).max().item()
    assert bool((err <= bound).all()), (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"max analytic {analytic.abs().max():.3e}, max numeric {numeric.abs().max():.3e}"
    )
