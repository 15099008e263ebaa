"""Flat run configuration, key=value config files and run manifests."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    seed: int = 0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    grad_clip: float = 0.0
    lr_drop_epoch: int = 0
    lr_drop_factor: float = 0.1
    offset_lr_scale: float = 0.1
    precision: str = "single"
    single_threaded: bool = False
    # architecture
    image_size: int = 64
    d_model: int = 64
    ffn_dim: int = 128
    heads: int = 2
    points: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    gn_groups: int = 8
    backbone_widths: tuple = (16, 32, 64, 96, 128)
    backbone_extra_convs: int = 1
    projection_depth: int = 1
    post_norm: bool = True
    num_joints: int = 42
    offset_unit_px: float = 0.0
    offset_unit_mm: float = 50.0
    # anchors
    in_plane_count: int = 16
    depth_count: int = 3
    # ablation toggles
    transformer_model: bool = True
    a2j_fusion: bool = True
    learned_weights: bool = True
    msdam: bool = True
    # loss
    alpha: float = 0.5
    tau1: float = 1.0
    tau2: float = 3.0
    lambda1: float = 3.0
    lambda2: float = 1.0

    def __post_init__(self):
        check = _CHECKS
        for f in fields(self):
            rule = check.get(f.name)
            if rule and not rule[0](getattr(self, f.name), self):
                raise ConfigError(f"invalid config: {f.name}={getattr(self, f.name)!r} ({rule[1]})")

    @property
    def anchor_stride(self) -> int:
        return self.image_size // int(round(math.sqrt(self.in_plane_count)))

    @property
    def inplane_unit(self) -> float:
        return self.offset_unit_px or self.image_size / 16

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _square_divisor(v, cfg) -> bool:
    side = int(round(math.sqrt(v))) if v > 0 else 0
    return side > 0 and side * side == v and cfg.image_size % side == 0


_CHECKS = {
    "learning_rate": (lambda v, c: v > 0, "must be > 0"),
    "weight_decay": (lambda v, c: v >= 0, "must be >= 0"),
    "offset_lr_scale": (lambda v, c: v > 0, "must be > 0"),
    "epochs": (lambda v, c: v >= 0, "must be >= 0"),
    "batch_size": (lambda v, c: v >= 1, "must be >= 1"),
    "grad_clip": (lambda v, c: v >= 0, "must be >= 0 (0 disables)"),
    "precision": (lambda v, c: v in ("single", "double"), "must be 'single' or 'double'"),
    "image_size": (lambda v, c: v >= 8, "must be >= 8"),
    "d_model": (lambda v, c: v > 0 and v % 2 == 0 and v % c.heads == 0 and v % c.gn_groups == 0,
                "must be even and divisible by heads and gn_groups"),
    "heads": (lambda v, c: v >= 1, "must be >= 1"),
    "points": (lambda v, c: v >= 1, "must be >= 1"),
    "enc_layers": (lambda v, c: v >= 0, "must be >= 0"),
    "dec_layers": (lambda v, c: v >= 0, "must be >= 0"),
    "backbone_widths": (lambda v, c: len(v) == 5 and all(int(x) > 0 for x in v),
                        "needs five positive widths"),
    "projection_depth": (lambda v, c: v >= 1, "must be >= 1"),
    "num_joints": (lambda v, c: v >= 1, "must be >= 1"),
    "in_plane_count": (_square_divisor, "must be a perfect square whose side divides image_size"),
    "depth_count": (lambda v, c: v >= 1, "must be >= 1"),
    "alpha": (lambda v, c: v > 0, "must be > 0"),
    "tau1": (lambda v, c: v > 0, "must be > 0"),
    "tau2": (lambda v, c: v > 0, "must be > 0"),
    "lambda1": (lambda v, c: v > 0, "must be > 0"),
    "lambda2": (lambda v, c: v > 0, "must be > 0"),
}

# preset used by the desk-scale acceptance runs
DESK_OVERRIDES = {"learning_rate": 1e-3, "batch_size": 8, "lr_drop_epoch": 15, "post_norm": False}


def _parse_value(name: str, raw: str, template):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid config: {name}={raw!r} (expected {type(template).__name__})") \
            from None


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def resolve_config(file_values: dict[str, str] | None = None,
                   flag_values: dict[str, object] | None = None,
                   base: TrainConfig | None = None) -> tuple[TrainConfig, dict[str, str]]:
    """Merge defaults < file < flags. Returns the config and per-key provenance."""
    base = base or TrainConfig()
    defaults = base.to_dict()
    values = dict(defaults)
    provenance = {k: "default" for k in values}
    for source, items in (("file", file_values or {}), ("flag", flag_values or {})):
        for key, raw in items.items():
            if raw is None:
                continue
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, raw, defaults[key]) if isinstance(raw, str) else raw
            provenance[key] = source
    return TrainConfig(**values), provenance


def load_config_file(path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text())


@dataclass
class RunManifest:
    config: dict
    provenance: dict
    seed: int
    code_version: str
    outputs: dict
    command: str = ""
    extras: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def build(cls, cfg: TrainConfig, provenance: dict, outputs: dict, command: str = "",
              extras: dict | None = None) -> "RunManifest":
        cfgd = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()}
        return cls(cfgd, dict(provenance), cfg.seed, __version__, dict(outputs), command,
                   dict(extras or {}))

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(**data)

    def train_config(self) -> TrainConfig:
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in self.config.items()}
        return TrainConfig(**vals)
