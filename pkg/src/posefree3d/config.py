"""Run configuration: schema, YAML loading with line-anchored errors, overrides.

A run config has five sections (model, loss, train, data, eval). Unknown keys
are rejected, value types are checked before any work starts, and `--set
key.path=value` overrides are applied on top of the file.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .discriminator import DiscVariant, VARIANT_KINDS
from .errors import ConfigurationError
from .geometry import (
    FixedLaw,
    GaussianLaw,
    POSE_PRIORS,
    PoseDistribution,
    UniformLaw,
)
from .objectives import LossWeights
from .renderer import RenderConfig


@dataclass
class ModelConfig:
    variant: str = "implicit"
    m: int = 24
    n_z: int = 64
    n_w: int = 64
    plane_resolution: int = 32
    plane_channels: int = 16
    feature_channels: int = 8
    feature_resolution: int = 32
    final_resolution: int = 128
    samples_per_ray: int = 96


@dataclass
class LossConfig:
    tau: float = 0.25
    lambda_pose: float = 1.0
    lambda_r1: float = 1.0
    pose_norm: str = "l2"


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    ema_decay: float = 0.999
    r1_every: int = 16
    seed: int = 0


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | folder
    path: Optional[str] = None
    pose_prior: str = "cub"  # bedroom | church | afhq | cub | custom
    custom_pitch: Optional[dict] = None  # {law: gaussian|uniform|fixed, ...}
    custom_yaw: Optional[dict] = None
    radius: float = 2.7
    fov: float = 0.23
    near: Optional[float] = None  # default: radius - 1.2
    far: Optional[float] = None  # default: radius + 1.2
    background: str = "black"  # black | white
    n_scenes: int = 50
    views_per_scene: int = 8
    seed: int = 1234
    depth_samples: int = 64
    flip_augment: bool = True


@dataclass
class EvalConfig:
    n_samples: int = 128
    k: int = 3
    n_poses: int = 12
    n_latents: int = 4
    fid: bool = True
    precision_recall: bool = True
    depth: bool = True
    embedding: bool = True
    seed: int = 99


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}

_ENUMS = {
    "model.variant": VARIANT_KINDS,
    "loss.pose_norm": ("l1", "l2"),
    "data.source": ("synthetic", "folder"),
    "data.pose_prior": ("bedroom", "church", "afhq", "cub", "custom"),
    "data.background": ("black", "white"),
}

_OPTIONAL = {"data.path", "data.near", "data.far", "data.custom_pitch", "data.custom_yaw"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived objects ----------------------------------------------------

    def variant(self) -> DiscVariant:
        return DiscVariant(kind=self.model.variant, m=self.model.m)

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_r1=self.loss.lambda_r1,
            lambda_pose=self.loss.lambda_pose,
            tau=self.loss.tau,
            pose_norm=self.loss.pose_norm,
        )

    @property
    def near(self) -> float:
        return self.data.near if self.data.near is not None else self.data.radius - 1.2

    @property
    def far(self) -> float:
        return self.data.far if self.data.far is not None else self.data.radius + 1.2

    @property
    def background_value(self) -> float:
        return 1.0 if self.data.background == "white" else 0.0

    def pose_prior(self) -> PoseDistribution:
        if self.data.pose_prior == "custom":
            if self.data.custom_pitch is None or self.data.custom_yaw is None:
                raise ConfigurationError(
                    "pose_prior 'custom' requires data.custom_pitch and data.custom_yaw"
                )
            return PoseDistribution(
                pitch_law=_parse_law(self.data.custom_pitch, "data.custom_pitch"),
                yaw_law=_parse_law(self.data.custom_yaw, "data.custom_yaw"),
                radius=self.data.radius,
                fov=self.data.fov,
            )
        base = POSE_PRIORS[self.data.pose_prior]
        return PoseDistribution(
            pitch_law=base.pitch_law,
            yaw_law=base.yaw_law,
            radius=self.data.radius,
            fov=self.data.fov,
        )

    def render_config(self, stratified: bool = True) -> RenderConfig:
        bg = self.background_value
        return RenderConfig(
            feature_resolution=self.model.feature_resolution,
            samples_per_ray=self.model.samples_per_ray,
            near=self.near,
            far=self.far,
            stratified=stratified,
            background=(bg, bg, bg),
        )

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def snapshot_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _parse_law(spec: dict, where: str):
    if not isinstance(spec, dict) or "law" not in spec:
        raise ConfigurationError(f"{where}: expected a mapping with a 'law' key")
    law = spec.get("law")
    try:
        if law == "gaussian":
            return GaussianLaw(mu=float(spec["mu"]), sigma=float(spec["sigma"]))
        if law == "uniform":
            return UniformLaw(lo=float(spec["lo"]), hi=float(spec["hi"]))
        if law == "fixed":
            return FixedLaw(value=float(spec["value"]))
    except KeyError as exc:
        raise ConfigurationError(f"{where}: missing parameter {exc} for law {law!r}")
    raise ConfigurationError(f"{where}: unknown law {law!r} (gaussian | uniform | fixed)")


# ----------------------------------------------------------------------------
# loading and validation


def _yaml_key_lines(text: str) -> dict[str, int]:
    """Map dotted key paths to 1-based line numbers for error anchoring."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k_node, v_node in node.value:
                path = f"{prefix}.{k_node.value}" if prefix else str(k_node.value)
                lines[path] = k_node.start_mark.line + 1
                walk(v_node, path)

    if root is not None:
        walk(root, "")
    return lines


def _anchor(path: str, lines: dict[str, int], source: str | None) -> str:
    loc = lines.get(path)
    if loc is not None and source is not None:
        return f"{source}:{loc}: {path}"
    return path


def _check_value(path: str, value: Any, expected_type, lines, source):
    if value is None:
        if path in _OPTIONAL:
            return None
        raise ConfigurationError(f"{_anchor(path, lines, source)}: must not be null")
    if expected_type is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(
                f"{_anchor(path, lines, source)}: expected a boolean, got {value!r}"
            )
        return value
    if expected_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(
                f"{_anchor(path, lines, source)}: expected an integer, got {value!r}"
            )
        return value
    if expected_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(
                f"{_anchor(path, lines, source)}: expected a number, got {value!r}"
            )
        return float(value)
    if expected_type is str:
        if not isinstance(value, str):
            raise ConfigurationError(
                f"{_anchor(path, lines, source)}: expected a string, got {value!r}"
            )
        if path in _ENUMS and value not in _ENUMS[path]:
            allowed = " | ".join(_ENUMS[path])
            raise ConfigurationError(
                f"{_anchor(path, lines, source)}: {value!r} is not one of: {allowed}"
            )
        return value
    if expected_type is dict:
        if not isinstance(value, dict):
            raise ConfigurationError(
                f"{_anchor(path, lines, source)}: expected a mapping, got {value!r}"
            )
        return value
    raise ConfigurationError(f"{_anchor(path, lines, source)}: unsupported type")


_BASE_TYPES = {
    "str": str, "int": int, "float": float, "bool": bool, "dict": dict,
    "Optional[str]": str, "Optional[float]": float, "Optional[dict]": dict,
}


def _field_type(f: dataclasses.Field):
    name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if name not in _BASE_TYPES:
        raise ConfigurationError(f"schema bug: unhandled field type {name}")
    return _BASE_TYPES[name]


def from_dict(raw: dict, lines: dict[str, int] | None = None, source: str | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping of sections")
    lines = lines or {}

    sections = {}
    for sec_name, value in raw.items():
        if sec_name not in _SECTIONS:
            raise ConfigurationError(
                f"{_anchor(sec_name, lines, source)}: unknown section "
                f"(expected one of: {', '.join(_SECTIONS)})"
            )
        if not isinstance(value, dict):
            raise ConfigurationError(f"{_anchor(sec_name, lines, source)}: must be a mapping")

    for sec_name, sec_cls in _SECTIONS.items():
        sec_raw = dict(raw.get(sec_name, {}))
        fields = {f.name: f for f in dataclasses.fields(sec_cls)}
        kwargs = {}
        for key, value in sec_raw.items():
            path = f"{sec_name}.{key}"
            if key not in fields:
                raise ConfigurationError(
                    f"{_anchor(path, lines, source)}: unknown key "
                    f"(expected one of: {', '.join(fields)})"
                )
            kwargs[key] = _check_value(path, value, _field_type(fields[key]), lines, source)
        sections[sec_name] = sec_cls(**kwargs)

    cfg = RunConfig(**sections)
    _validate_cross_fields(cfg)
    return cfg


def _validate_cross_fields(cfg: RunConfig):
    cfg.variant()  # validates kind and m
    cfg.weights()
    if cfg.model.final_resolution < cfg.model.feature_resolution or (
        cfg.model.final_resolution % cfg.model.feature_resolution
    ):
        raise ConfigurationError(
            "model.final_resolution must be an integer multiple of model.feature_resolution"
        )
    if cfg.model.samples_per_ray < 2:
        raise ConfigurationError("model.samples_per_ray must be >= 2")
    if cfg.train.batch_size < 4 or cfg.train.batch_size % 2:
        raise ConfigurationError(
            "train.batch_size must be even and >= 4: fake batches are built as "
            "same-pose pairs and contrastive variants need at least two pairs"
        )
    if cfg.train.lr_g <= 0 or cfg.train.lr_d <= 0:
        raise ConfigurationError("learning rates must be positive")
    if not (0.0 <= cfg.train.ema_decay < 1.0):
        raise ConfigurationError("train.ema_decay must lie in [0, 1)")
    if cfg.train.r1_every < 1:
        raise ConfigurationError("train.r1_every must be >= 1")
    if cfg.data.source == "folder" and not cfg.data.path:
        raise ConfigurationError("data.source 'folder' requires data.path")
    if not (0.0 < cfg.data.fov < math.pi) or cfg.data.radius <= 0:
        raise ConfigurationError("data.radius must be > 0 and data.fov in (0, pi)")
    if not (0.0 < cfg.near < cfg.far):
        raise ConfigurationError("require 0 < near < far")
    if cfg.data.pose_prior == "custom":
        cfg.pose_prior()  # validates the custom laws


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Load, override and validate a YAML run config."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}")
    lines = _yaml_key_lines(text)

    raw = apply_overrides(raw, overrides or [])
    return from_dict(raw, lines=lines, source=str(path))


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply 'section.key=value' overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        key, _, value_text = item.partition("=")
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigurationError(f"override key {key!r} must look like section.key")
        sec, name = parts
        if sec not in _SECTIONS or name not in {f.name for f in dataclasses.fields(_SECTIONS[sec])}:
            raise ConfigurationError(f"override targets unknown key {key!r}")
        try:
            value = yaml.safe_load(value_text)
        except yaml.YAMLError:
            raise ConfigurationError(f"override {item!r}: unparseable value")
        raw.setdefault(sec, {})[name] = value
    return raw


def preset_path(name: str) -> Path:
    """Path of a bundled preset config (prnerf, contranerf, ...)."""
    p = Path(__file__).parent / "presets" / f"{name}.yaml"
    if not p.exists():
        available = sorted(q.stem for q in p.parent.glob("*.yaml"))
        raise ConfigurationError(f"no preset {name!r}; available: {', '.join(available)}")
    return p
