"""Model/training configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

ENCODER_KINDS = ("conv2", "resnet18")
RECON_TARGET_MODES = ("full_spectrum", "low_freq", "high_freq")

# Feature capsule counts produced by each backbone.
FEATURE_CAPS = {"conv2": 1152, "resnet18": 288}

MNIST_C_CORRUPTIONS = (
    "shot_noise",
    "impulse_noise",
    "glass_blur",
    "motion_blur",
    "shear",
    "scale",
    "rotate",
    "brightness",
    "translate",
    "stripe",
    "fog",
    "spatter",
    "dotted_line",
    "zigzag",
    "canny_edges",
)

# Noise, blur and occlusion corruptions.
DEFAULT_SHAPE_SUBSET = (
    "shot_noise",
    "impulse_noise",
    "glass_blur",
    "motion_blur",
    "fog",
    "spatter",
    "dotted_line",
    "zigzag",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_kind: str = "conv2"
    n_feature_caps: int = 1152
    feature_dim: int = 8
    n_object_caps: int = 10
    object_dim: int = 16
    decoder_hidden: tuple[int, int] = (512, 1024)

    # inference
    local_routing_iters: int = 3
    max_global_steps: int = 5
    entropy_threshold: float = 0.6
    entropy_temperature: float = 0.1
    mask_threshold: float = 0.1
    maxmin_lb: float = 0.0
    maxmin_ub: float = 1.0
    routing_floor: float = 0.5
    disable_spatial_mask: bool = False
    disable_feature_binding: bool = False

    # training
    recon_target_mode: str = "full_spectrum"
    batch_size: int = 128
    initial_lr: float = 0.1
    fallback_lr: float = 0.001
    lr_decay: float = 0.96
    patience: int = 20
    max_epochs: int = 200
    validation_fraction: float = 0.1
    recon_loss_weight: float = 0.0005 * 784
    margin_pos: float = 0.9
    margin_neg: float = 0.1
    margin_lambda: float = 0.5

    # experiment plumbing
    shape_subset: tuple[str, ...] = DEFAULT_SHAPE_SUBSET
    seeds: int = 1
    data_root: str = "data"
    out_dir: str = "runs"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        """Short digest of the model-defining fields (ablation flags excluded)."""
        skip = {"disable_spatial_mask", "disable_feature_binding", "seeds", "data_root", "out_dir"}
        text = dump_config(self, skip=skip)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def validate_config(config: ModelConfig) -> ModelConfig:
    if config.encoder_kind not in ENCODER_KINDS:
        raise ConfigError(f"unknown encoder kind {config.encoder_kind!r}; expected one of {ENCODER_KINDS}")
    if config.recon_target_mode not in RECON_TARGET_MODES:
        raise ConfigError(f"unknown recon_target_mode {config.recon_target_mode!r}")
    if config.max_global_steps < 1:
        raise ConfigError("max_global_steps must be ≥ 1")
    if config.local_routing_iters < 1:
        raise ConfigError("local_routing_iters must be ≥ 1")
    if not 0.0 < config.mask_threshold < 1.0:
        raise ConfigError(f"mask_threshold must lie in (0, 1), got {config.mask_threshold}")
    if config.entropy_threshold <= 0:
        raise ConfigError("entropy_threshold must be > 0")
    if config.entropy_temperature <= 0:
        raise ConfigError("entropy_temperature must be > 0")
    if config.maxmin_lb >= config.maxmin_ub:
        raise ConfigError("maxmin_lb must be < maxmin_ub")
    for name in ("n_feature_caps", "feature_dim", "n_object_caps", "object_dim", "batch_size", "patience", "max_epochs", "seeds"):
        if getattr(config, name) < 1:
            raise ConfigError(f"{name} must be ≥ 1")
    if config.n_object_caps != 10:
        raise ConfigError("exactly 10 object capsules are supported")
    expected = FEATURE_CAPS[config.encoder_kind]
    if config.n_feature_caps != expected:
        raise ConfigError(
            f"n_feature_caps={config.n_feature_caps} does not match the {config.encoder_kind} encoder ({expected})"
        )
    if config.initial_lr <= 0 or config.fallback_lr <= 0:
        raise ConfigError("learning rates must be > 0")
    if not 0 < config.lr_decay <= 1:
        raise ConfigError("lr_decay must lie in (0, 1]")
    if not 0 < config.validation_fraction < 1:
        raise ConfigError("validation_fraction must lie in (0, 1)")
    if config.recon_loss_weight < 0:
        raise ConfigError("recon_loss_weight must be ≥ 0")
    unknown = set(config.shape_subset) - set(MNIST_C_CORRUPTIONS)
    if unknown:
        raise ConfigError(f"unknown corruptions in shape_subset: {sorted(unknown)}")
    return config


def for_encoder(kind: str, **overrides) -> ModelConfig:
    """Default config with the capsule count matching ``kind``."""
    if kind not in FEATURE_CAPS:
        raise ConfigError(f"unknown encoder kind {kind!r}")
    return validate_config(ModelConfig(encoder_kind=kind, n_feature_caps=FEATURE_CAPS[kind], **overrides))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        return tuple(items)
    return raw


def dump_config(config: ModelConfig, skip=()) -> str:
    lines = [f"{f.name} = {_format(getattr(config, f.name))}" for f in fields(config) if f.name not in skip]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    known = {f.name: f for f in fields(base)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            changes[key] = _parse(value, getattr(base, key))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return validate_config(dataclasses.replace(base, **changes))


def load_config(path: str | Path, base: ModelConfig | None = None) -> ModelConfig:
    return parse_config(Path(path).read_text(), base)


def save_config(config: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config))


__all__ = [
    "ConfigError",
    "DEFAULT_SHAPE_SUBSET",
    "ENCODER_KINDS",
    "FEATURE_CAPS",
    "MNIST_C_CORRUPTIONS",
    "ModelConfig",
    "RECON_TARGET_MODES",
    "dump_config",
    "for_encoder",
    "load_config",
    "parse_config",
    "save_config",
    "validate_config",
]
