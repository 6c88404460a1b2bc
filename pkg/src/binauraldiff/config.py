"""Run configuration: one JSON file covering dataset synthesis, both
training stages, and sampling.

Unknown keys are rejected so typos fail before any work starts; keys whose
name starts with "_" are treated as comments and ignored, which is where
reference values for full-scale runs live in the shipped template.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import prompts
from .diffusion import ScheduleConfig, make_schedule
from .dsp import StftConfig
from .latent_ae import AEConfig, AETrainConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Dataset sizes, audio length, and the category mix."""

    train_count: int = 2000
    val_count: int = 100
    test_count: int = 200
    duration_s: float = 1.0
    sample_rate: int = 16000
    workers: int = 1
    category_mix: dict = field(
        default_factory=lambda: dict(prompts.CATEGORY_MIX))

    def __post_init__(self):
        if self.train_count < 1 or self.val_count < 0 or self.test_count < 0:
            raise ConfigError("dataset counts must be positive")
        if not 0.25 <= self.duration_s <= 30.0:
            raise ConfigError("duration_s must lie in [0.25, 30]")
        if self.sample_rate != 16000:
            raise ConfigError("the simulator is calibrated for 16 kHz only")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if set(self.category_mix) != set(prompts.CATEGORIES):
            raise ConfigError(
                f"category_mix must cover exactly {prompts.CATEGORIES}")
        if any(v < 0 for v in self.category_mix.values()) or \
                sum(self.category_mix.values()) <= 0:
            raise ConfigError("category_mix needs nonnegative weights, not all zero")


@dataclass
class DiffusionTrainConfig:
    steps: int = 20000
    batch_size: int = 4
    lr: float = 1e-4
    cond_dropout: float = 0.1
    lambda_loc: float = 1.0
    flip_batch: int = 4
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1)")
        if self.lambda_loc < 0:
            raise ConfigError("lambda_loc must be nonnegative")
        if self.flip_batch < 0:
            raise ConfigError("flip_batch must be nonnegative")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be positive")


@dataclass
class SamplingConfig:
    steps: int = 200
    guidance: float = 2.5

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampling steps must be positive")
        if self.guidance < 0:
            raise ConfigError("guidance must be nonnegative")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    ae_train: AETrainConfig = field(default_factory=AETrainConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    diffusion_train: DiffusionTrainConfig = field(
        default_factory=DiffusionTrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def __post_init__(self):
        if self.unet.latent_channels != self.ae.latent_channels:
            raise ConfigError(
                "unet.latent_channels must match ae.latent_channels")
        n_bins = self.stft.window_size // 2 + 1
        r = self.ae.downsample_ratio
        padded = n_bins + (-n_bins) % r
        if self.ae.mix_f_bins is not None and self.ae.mix_f_bins != padded // r:
            raise ConfigError(
                f"ae.mix_f_bins must be {padded // r} for this stft/ratio "
                f"(or null to disable frequency mixing)")
        if self.ae.mix_in_bins is not None and self.ae.mix_in_bins != padded:
            raise ConfigError(
                f"ae.mix_in_bins must be {padded} for this stft/ratio "
                f"(or null to disable full-resolution mixing)")
        make_schedule(self.schedule)  # raises on a malformed beta range


# sections of the config file and the dataclass each one feeds
_SECTIONS = {
    "data": DataConfig,
    "stft": StftConfig,
    "ae": AEConfig,
    "ae_train": AETrainConfig,
    "unet": UNetConfig,
    "schedule": ScheduleConfig,
    "diffusion_train": DiffusionTrainConfig,
    "sampling": SamplingConfig,
}

# JSON carries no tuples; these fields convert back on load
_TUPLE_FIELDS = {"widths", "strides", "attn_levels"}

# constructor-only or derived fields that a config file may not set
_UNSETTABLE = {"stft": {"window"}}


def _strip_comments(d: dict) -> dict:
    return {k: v for k, v in d.items() if not k.startswith("_")}


def _build_section(name: str, cls, raw: dict):
    raw = _strip_comments(raw)
    allowed = {f.name for f in fields(cls)} - _UNSETTABLE.get(name, set())
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in section {name!r}: {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}")
    kv = {}
    for k, v in raw.items():
        if k in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        kv[k] = v
    try:
        return cls(**kv)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {name!r}: {e}") from e


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    d = _strip_comments(d)
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown config section(s): {sorted(unknown)}; "
            f"allowed: {sorted(_SECTIONS)}")
    parts = {name: _build_section(name, cls, d.get(name, {}))
             for name, cls in _SECTIONS.items()}
    try:
        return RunConfig(**parts)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name, cls in _SECTIONS.items():
        section = asdict(getattr(cfg, name))
        for skip in _UNSETTABLE.get(name, set()):
            section.pop(skip, None)
        for k, v in section.items():
            if isinstance(v, tuple):
                section[k] = list(v)
        out[name] = section
    return out


def default_config_dict() -> dict:
    """The shipped template: desk-scale defaults plus commented reference
    values for a full-scale run."""
    out = config_to_dict(RunConfig())
    out["data"]["_full_scale"] = "production runs use ~376k train samples"
    out["diffusion_train"]["_full_scale"] = "production runs use ~500k steps"
    return out


def write_default_config(path) -> None:
    Path(path).write_text(
        json.dumps(default_config_dict(), indent=1) + "\n", encoding="utf-8")
