"""Run configuration: dataclasses plus a strict flat-INI file format.

Sections are [model], [train], [data], [output]; every key maps 1:1 onto
a dataclass field, unknown sections or keys are rejected, and a resolved
snapshot can be rendered back out such that re-parsing it reproduces the
run exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .tensor import ConfigError

VARIANTS = ("unet", "rec_simple", "rec_middle", "rec_last", "sru", "dru")
SYNTH_TASKS = ("blobs", "curves")


@dataclass
class ModelConfig:
    variant: str = "dru"
    level: int = 4
    iterations: int = 3
    base_channels: int = 8
    in_channels: int = 3
    n_classes: int = 1
    mask_feedback: bool = True
    norm_groups: int = 8

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"model.variant: '{self.variant}' not one of {VARIANTS}"
            )
        if not 0 <= self.level <= 4:
            raise ConfigError(f"model.level: {self.level} outside 0..4")
        if self.iterations < 1:
            raise ConfigError(f"model.iterations: {self.iterations} must be >= 1")
        if self.in_channels < 1:
            raise ConfigError(f"model.in_channels: {self.in_channels} must be >= 1")
        if self.n_classes < 1:
            raise ConfigError(f"model.n_classes: {self.n_classes} must be >= 1")
        if self.base_channels < 1 or self.base_channels % self.norm_groups:
            raise ConfigError(
                f"model.base_channels: {self.base_channels} must be a positive "
                f"multiple of norm_groups ({self.norm_groups})"
            )

    def uses_mask_feedback(self) -> bool:
        """Effective feedback: rec_simple always concatenates the mask,
        dru/sru follow the flag, the rest never see it."""
        if self.variant == "rec_simple":
            return True
        if self.variant in ("dru", "sru"):
            return self.mask_feedback
        return False


@dataclass
class TrainConfig:
    alpha: float = 0.4
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    precision: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment_hflip: bool = False
    max_seconds: float = 0.0  # 0 disables the wall-clock cap

    def validate(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"train.alpha: {self.alpha} outside (0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError(f"train.learning_rate: {self.learning_rate} must be > 0")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size: {self.batch_size} must be >= 1")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs: {self.epochs} must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(
                f"train.precision: '{self.precision}' not float32/float64"
            )
        if self.max_seconds < 0:
            raise ConfigError(f"train.max_seconds: {self.max_seconds} must be >= 0")


@dataclass
class DataConfig:
    source: str = "synth"
    synth_task: str = "curves"
    synth_train: int = 400
    synth_val: int = 100
    synth_test: int = 0
    synth_seed: int = 7
    height: int = 64
    width: int = 64
    manifest: str = ""
    patch_size: int = 0  # 0 = whole images
    patch_stride: int = 0  # 0 = same as patch_size

    def validate(self):
        if self.source not in ("synth", "manifest"):
            raise ConfigError(f"data.source: '{self.source}' not synth/manifest")
        if self.source == "synth":
            if self.synth_task not in SYNTH_TASKS:
                raise ConfigError(
                    f"data.synth_task: '{self.synth_task}' not one of {SYNTH_TASKS}"
                )
            if self.height % 16 or self.width % 16:
                raise ConfigError(
                    f"data.height/width: ({self.height},{self.width}) must be "
                    "multiples of 16"
                )
            if self.synth_train < 1:
                raise ConfigError("data.synth_train must be >= 1")
        else:
            if not self.manifest:
                raise ConfigError("data.manifest required when source = manifest")
        if self.patch_size:
            if self.patch_size % 16:
                raise ConfigError(
                    f"data.patch_size: {self.patch_size} must be a multiple of 16"
                )
            stride = self.patch_stride or self.patch_size
            if not 1 <= stride <= self.patch_size:
                raise ConfigError(
                    f"data.patch_stride: {stride} outside 1..patch_size"
                )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/out"

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.data.validate()


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _coerce(section: str, key: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"{section}.{key}: cannot parse '{raw}' as {kind.__name__}"
        ) from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    run = RunConfig()
    for section in parser.sections():
        if section == "output":
            for key, raw in parser.items(section):
                if key != "dir":
                    raise ConfigError(f"output.{key}: unknown key (only 'dir')")
                run.output_dir = raw.strip()
            continue
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(
                f"unknown config section [{section}] "
                f"(expected {sorted(_SECTIONS) + ['output']})"
            )
        target = getattr(run, section)
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in parser.items(section):
            f = by_name.get(key)
            if f is None:
                raise ConfigError(f"{section}.{key}: unknown key")
            setattr(target, key, _coerce(section, key, _field_kind(f), raw))
    run.validate()
    return run


def _field_kind(f: dataclasses.Field):
    # dataclass field types arrive as strings under `from __future__ import
    # annotations`; all config fields are plain builtins.
    return {"str": str, "int": int, "float": float, "bool": bool}[
        f.type if isinstance(f.type, str) else f.type.__name__
    ]


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def render_config(run: RunConfig) -> str:
    """Resolved snapshot; parse_config(render_config(c)) == c."""
    out = io.StringIO()
    for section in ("model", "train", "data"):
        obj = getattr(run, section)
        out.write(f"[{section}]\n")
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            out.write(f"{f.name} = {value}\n")
        out.write("\n")
    out.write("[output]\n")
    out.write(f"dir = {run.output_dir}\n")
    return out.getvalue()


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    cfg = ModelConfig(**d)
    cfg.validate()
    return cfg
