"""Run configuration: schema, validation, JSON round-trip, presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .encoder import ENCODER_VARIANTS, EncoderConfig
from .occ_decoder import POOLING_MODES
from .pixel_decoder import DeformAttnConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message lists every violated field."""


@dataclass
class BackboneConfig:
    width: int = 32
    stride: int = 8
    context_channels: int = 32


@dataclass
class DepthBinsConfig:
    d_min: float = 0.5
    d_max: float = 8.5
    count: int = 16


@dataclass
class DecoderConfig:
    num_queries: int = 16
    heads: int = 4
    layers: int = 3
    pooling_mode: str = "max"


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    lr_milestones: tuple[float, ...] = (0.7, 0.9)
    lr_gamma: float = 0.1
    points_per_sample: int = 2048
    beta: float = 0.25
    sampling_mode: str = "class_guided"
    supervision: str = "dense"
    flip_augment: bool = False
    lambda_cls: float = 2.0
    lambda_bce: float = 5.0
    lambda_dice: float = 5.0
    no_object_weight: float = 0.1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    volume_resolution: tuple[int, int, int] = (16, 16, 4)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    depth_bins: DepthBinsConfig = field(default_factory=DepthBinsConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pixel_decoder: DeformAttnConfig = field(default_factory=DeformAttnConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(cls, data: dict, prefix: str, errors: list[str]):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            errors.append(f"{prefix}{key}: unknown field")
            continue
        f = known[key]
        if is_dataclass(f.type) or f.type in (
            "BackboneConfig", "DepthBinsConfig", "EncoderConfig", "DeformAttnConfig",
            "DecoderConfig", "TrainConfig",
        ):
            sub_cls = _SUBCONFIGS.get(key)
            if sub_cls is None:
                errors.append(f"{prefix}{key}: unexpected nested section")
                continue
            if not isinstance(value, dict):
                errors.append(f"{prefix}{key}: expected an object")
                continue
            kwargs[key] = _coerce(sub_cls, value, f"{prefix}{key}.", errors)
        else:
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{prefix.rstrip('.') or 'config'}: {exc}")
        return cls()


_SUBCONFIGS = {
    "backbone": BackboneConfig,
    "depth_bins": DepthBinsConfig,
    "encoder": EncoderConfig,
    "pixel_decoder": DeformAttnConfig,
    "decoder": DecoderConfig,
    "training": TrainConfig,
}


def validate(cfg: RunConfig) -> list[str]:
    """All constraint violations, one message per offending field."""
    errors = []

    def check(cond, msg):
        if not cond:
            errors.append(msg)

    check(cfg.seed >= 0, "seed: must be >= 0")
    check(cfg.threads >= 1, "threads: must be >= 1")
    check(
        len(cfg.volume_resolution) == 3 and all(r >= 1 for r in cfg.volume_resolution),
        "volume_resolution: needs three positive ints",
    )
    b = cfg.backbone
    check(b.width >= 1, "backbone.width: must be >= 1")
    check(b.stride >= 2 and (b.stride & (b.stride - 1)) == 0, "backbone.stride: power of two >= 2")
    check(b.context_channels >= 1, "backbone.context_channels: must be >= 1")
    d = cfg.depth_bins
    check(0 < d.d_min < d.d_max, "depth_bins: need 0 < d_min < d_max")
    check(d.count >= 2, "depth_bins.count: must be >= 2")
    e = cfg.encoder
    check(e.stages >= 1, "encoder.stages: must be >= 1")
    check(e.blocks_per_stage >= 1, "encoder.blocks_per_stage: must be >= 1")
    check(e.base_channels % e.heads == 0, "encoder: base_channels must be divisible by heads")
    check(e.window_size >= 1, "encoder.window_size: must be >= 1")
    check(e.variant in ENCODER_VARIANTS, f"encoder.variant: must be one of {ENCODER_VARIANTS}")
    if len(cfg.volume_resolution) == 3:
        down = 2 ** (e.stages - 1)
        check(
            cfg.volume_resolution[0] % down == 0 and cfg.volume_resolution[1] % down == 0,
            f"volume_resolution: X and Y must be divisible by 2^(stages-1) = {down}",
        )
    p = cfg.pixel_decoder
    check(p.embed_channels % p.heads == 0, "pixel_decoder: embed_channels divisible by heads")
    check(p.embed_channels % 6 == 0, "pixel_decoder.embed_channels: divisible by 6")
    check(p.layers >= 0, "pixel_decoder.layers: must be >= 0")
    check(p.points >= 1, "pixel_decoder.points: must be >= 1")
    dec = cfg.decoder
    check(dec.num_queries >= 1, "decoder.num_queries: must be >= 1")
    check(dec.layers >= 0, "decoder.layers: must be >= 0")
    check(p.embed_channels % dec.heads == 0, "decoder.heads: must divide pixel channels")
    check(dec.pooling_mode in POOLING_MODES, f"decoder.pooling_mode: one of {POOLING_MODES}")
    t = cfg.training
    check(t.steps >= 1, "training.steps: must be >= 1")
    check(t.batch_size >= 1, "training.batch_size: must be >= 1")
    check(t.lr > 0, "training.lr: must be > 0")
    check(t.weight_decay >= 0, "training.weight_decay: must be >= 0")
    check(t.points_per_sample >= 2, "training.points_per_sample: must be >= 2")
    check(t.points_per_sample % 2 == 0, "training.points_per_sample: must be even")
    check(t.beta >= 0, "training.beta: must be >= 0")
    check(
        t.sampling_mode in ("class_guided", "uniform"),
        "training.sampling_mode: class_guided or uniform",
    )
    check(t.supervision in ("dense", "sparse"), "training.supervision: dense or sparse")
    check(all(0 < m <= 1 for m in t.lr_milestones), "training.lr_milestones: fractions in (0, 1]")
    check(0 < t.lr_gamma <= 1, "training.lr_gamma: in (0, 1]")
    return errors


def from_dict(data: dict) -> RunConfig:
    """Build and fully validate a config; raises ConfigError listing all problems."""
    errors: list[str] = []
    cfg = _coerce(RunConfig, data, "", errors)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def from_json(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(data)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return from_json(f.read())


def toy_preset() -> RunConfig:
    """Desk-scale default configuration."""
    return RunConfig()


def paper_scale_preset() -> RunConfig:
    """Full-scale hyperparameters as published; not runnable at desk scale."""
    return RunConfig(
        volume_resolution=(128, 128, 16),
        backbone=BackboneConfig(width=64, stride=16, context_channels=128),
        depth_bins=DepthBinsConfig(d_min=2.0, d_max=58.0, count=112),
        encoder=EncoderConfig(base_channels=128, stages=4, blocks_per_stage=2),
        pixel_decoder=DeformAttnConfig(embed_channels=192, layers=6, heads=8, points=4,
                                       mask_channels=192),
        decoder=DecoderConfig(num_queries=100, heads=8, layers=9),
        training=TrainConfig(steps=100_000, batch_size=8, points_per_sample=50176),
    )


PRESETS = {"toy": toy_preset, "paper_scale": paper_scale_preset}
