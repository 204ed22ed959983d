"""Training configuration: flat key-value files, overrides, and presets.

Config files are plain text, one ``key = value`` per line (``#`` comments),
with keys mirroring TrainConfig field names exactly; unknown keys are
rejected. Values use JSON literals where they are not bare strings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError
from .features import BackboneConfig
from .losses import FocalConfig


@dataclass
class TrainConfig:
    # data
    dataset: str = "layout"            # "layout" (directory) or "synthetic"
    data_root: str = ""
    fold: int = 0
    num_folds: int = 4
    input_size: int = 473
    augment: bool = True
    # episode protocol
    n_way: int = 2
    k_shot: int = 1
    episode_mode: str = "any"
    episodes_per_epoch: int = 1000
    episode_pool: int = 0              # >0: cycle a fixed pre-sampled pool
    # architecture
    backbone: str = "pretrained_midlevel"
    backbone_frozen: bool = True
    backbone_weights: str = ""
    channels: int = 256
    z_scales: int = 4
    fusion_mode: str = "A+C"
    use_support_attention: bool = True
    use_scale_attention: bool = True
    relation_groups: int = 4
    # metric learning
    use_pml: bool = True
    pml_strategy: str = "spat"
    pml_n_t: int = 20
    pml_alpha: float = 1.0
    pml_lambda: float = 0.4
    pml_start_epoch: int = 5
    pml_tau_scale: float = 0.1
    # segmentation loss
    focal_gamma: float = 2.0
    focal_class_weighting: bool = True
    focal_include_background: bool = True
    # optimization
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0001
    poly_power: float = 0.9
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    threads: int = 0
    # synthetic generator (used when dataset == "synthetic")
    synth_classes: int = 8
    synth_images_per_class: int = 20
    synth_cooccur: float = 0.6
    synth_seed: int = 0
    # outputs
    out_dir: str = "runs/exp"
    checkpoint_every: int = 0          # epochs; 0 = final checkpoint only

    def validate(self):
        positive = ("input_size", "n_way", "k_shot", "episodes_per_epoch",
                    "channels", "z_scales", "relation_groups", "pml_alpha",
                    "epochs", "batch_size", "lr", "synth_classes",
                    "synth_images_per_class")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        non_negative = ("fold", "pml_n_t", "pml_lambda", "pml_start_epoch",
                        "momentum", "weight_decay", "poly_power", "focal_gamma",
                        "episode_pool", "threads", "checkpoint_every",
                        "pml_tau_scale", "synth_cooccur")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.dataset not in ("layout", "synthetic"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.episode_mode not in ("any", "all"):
            raise ConfigError(f"unknown episode_mode {self.episode_mode!r}")
        if self.fusion_mode not in ("A+C", "C+C", "A+A", "C+A"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.pml_strategy not in ("spat", "rnd", "fea"):
            raise ConfigError(f"unknown pml_strategy {self.pml_strategy!r}")
        if self.channels % self.relation_groups != 0:
            raise ConfigError("relation_groups must divide channels")
        if not self.use_scale_attention and self.z_scales != 1:
            raise ConfigError("use_scale_attention = false requires z_scales = 1")
        if not 0 <= self.fold < self.num_folds:
            raise ConfigError("fold must lie in [0, num_folds)")
        self.backbone_config().validate()
        self.focal_config().validate()
        return self

    def backbone_config(self):
        return BackboneConfig(kind=self.backbone, frozen=self.backbone_frozen,
                              output_channels=self.channels,
                              weights_path=self.backbone_weights)

    def focal_config(self):
        return FocalConfig(gamma=self.focal_gamma,
                           class_weighting=self.focal_class_weighting,
                           include_background=self.focal_include_background)

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key, raw):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare string


def _coerce(key, value):
    kind = _FIELDS[key]
    try:
        if kind == "bool" or kind is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError(value)
        if kind == "int" or kind is int:
            if isinstance(value, bool):
                raise ValueError(value)
            out = int(value)
            if float(out) != float(value):
                raise ValueError(value)
            return out
        if kind == "float" or kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def config_from_dict(entries, base=None):
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    for key, value in entries.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    return cfg.validate()


def read_config_file(path, base=None):
    entries = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, raw = line.split("=", 1)
            key = key.strip()
            entries[key] = _parse_value(key, raw)
    return config_from_dict(entries, base=base)


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings on top of an existing config."""
    entries = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        entries[key.strip()] = _parse_value(key.strip(), raw)
    return config_from_dict(entries, base=cfg)


def pascal_preset():
    """Training schedule for the 20-class 4-fold benchmark."""
    return TrainConfig(epochs=200, lr=0.0025, batch_size=4, pml_start_epoch=5).validate()


def coco_preset():
    """Training schedule for the 80-class 4-fold benchmark."""
    return TrainConfig(epochs=50, lr=0.005, batch_size=8, pml_start_epoch=1).validate()


def desk_preset(out_dir="runs/desk"):
    """CPU-scale preset: synthetic shapes, small random backbone, short run."""
    return TrainConfig(
        dataset="synthetic",
        data_root="",
        input_size=96,
        augment=False,
        n_way=2,
        k_shot=1,
        episodes_per_epoch=10,
        episode_pool=16,
        backbone="tiny_random",
        channels=48,
        z_scales=3,
        relation_groups=4,
        pml_n_t=20,
        pml_start_epoch=5,
        focal_gamma=2.0,
        lr=0.05,
        epochs=30,
        batch_size=1,
        seed=0,
        threads=1,
        out_dir=out_dir,
    ).validate()


PRESETS = {"pascal": pascal_preset, "coco": coco_preset, "desk": desk_preset}
