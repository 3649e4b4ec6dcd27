"""Run configuration: one strict JSON document holding every knob.

Unknown keys are rejected at every nesting level so an ablation typo fails
loudly instead of silently running the default. Defaults are the toy-scale
operating point (CPU training in minutes); the full-scale architecture
(channels 32-256, ResNet34 block counts, 512-dim embeddings, reduction 16)
stays expressible through the same document.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

_MISSING = object()


@dataclass
class FeatureSection:
    sample_rate: int = 16000
    n_mels: int = 64
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    f_min: float = 20.0
    f_max: float | None = None  # null -> Nyquist
    log_floor: float = 1e-10
    chunk: int = 200
    mean_norm: str = "per_bin"  # per_bin | per_frame


@dataclass
class DataSection:
    data_dir: str = "data"
    num_speakers: int = 20
    utts_per_speaker: int = 50
    eval_utts_per_speaker: int = 10
    duration_s: float = 2.0
    num_trials: int = 400


@dataclass
class BlockSection:
    kind: str = "dct_gcm"  # none | se | att_gcm | dct_gcm
    tfe: bool = False
    transform: str = "fc"  # fc | conv1d
    reduction: int = 4  # full-scale runs use 16
    attention_hidden_ratio: float = 0.125
    conv_kernel: int | None = None  # null -> adaptive odd size
    eca_gamma: float = 2.0
    eca_b: float = 1.0
    dct_components: int = 2
    dct_grid: list = field(default_factory=lambda: [8, 25])
    tfe_groups: int = 8
    tfe_eps: float = 1e-5
    tfe_scale_init: float = 0.0
    tfe_shift_init: float = 1.0
    tfe_shared: bool = False
    insertion: str = "after_bn"  # after_bn | before_bn | before_conv
    stages: str = "all"  # all | last


@dataclass
class ModelSection:
    stage_channels: list = field(default_factory=lambda: [8, 16, 32, 64])
    blocks_per_stage: list = field(default_factory=lambda: [2, 2, 2, 2])
    stage_strides: list = field(default_factory=lambda: [2, 2, 2, 1])
    stem_stride: list = field(default_factory=lambda: [2, 2])
    embed_dim: int = 128
    asp_hidden: int = 64
    block: BlockSection = field(default_factory=BlockSection)


@dataclass
class TrainSection:
    epochs: int = 4
    speakers_per_batch: int = 16
    utts_per_speaker_batch: int = 2
    base_lr: float = 2e-3
    warmup_epochs: int = 1
    lr_decay: float = 0.75
    lr_decay_every: int = 18
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    proto_scale_init: float = 10.0
    proto_bias_init: float = -5.0


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"
    features: FeatureSection = field(default_factory=FeatureSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)


_SECTION_TYPES = {
    "features": FeatureSection,
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "block": BlockSection,
}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; known keys: {sorted(known)}")
    kwargs = {}
    for name, value in doc.items():
        if name in _SECTION_TYPES:
            kwargs[name] = _build(_SECTION_TYPES[name], value, f"{where}.{name}")
        elif isinstance(value, dict):
            raise ConfigError(f"{where}.{name}: unexpected object")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_VALID = {
    "features.mean_norm": ("per_bin", "per_frame"),
    "model.block.kind": ("none", "se", "att_gcm", "dct_gcm"),
    "model.block.transform": ("fc", "conv1d"),
    "model.block.insertion": ("after_bn", "before_bn", "before_conv"),
    "model.block.stages": ("all", "last"),
}


def validate(cfg: RunConfig) -> RunConfig:
    checks = {
        "features.mean_norm": cfg.features.mean_norm,
        "model.block.kind": cfg.model.block.kind,
        "model.block.transform": cfg.model.block.transform,
        "model.block.insertion": cfg.model.block.insertion,
        "model.block.stages": cfg.model.block.stages,
    }
    for key, value in checks.items():
        if value not in _VALID[key]:
            raise ConfigError(f"{key}: {value!r} not in {_VALID[key]}")
    if not (len(cfg.model.stage_channels) == len(cfg.model.blocks_per_stage)
            == len(cfg.model.stage_strides)):
        raise ConfigError("model: stage_channels, blocks_per_stage and stage_strides must align")
    if len(cfg.model.stem_stride) != 2:
        raise ConfigError("model.stem_stride must have two entries")
    if len(cfg.model.block.dct_grid) != 2:
        raise ConfigError("model.block.dct_grid must have two entries")
    if cfg.train.utts_per_speaker_batch < 2:
        raise ConfigError("train.utts_per_speaker_batch must be at least 2")
    if cfg.train.epochs < 1 or cfg.train.speakers_per_batch < 1:
        raise ConfigError("train.epochs and train.speakers_per_batch must be positive")
    return cfg


def from_dict(doc: dict) -> RunConfig:
    return validate(_build(RunConfig, doc, "config"))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return from_dict(doc)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def save(path: str, cfg: RunConfig) -> None:
    with open(path, "w") as f:
        f.write(dumps(cfg) + "\n")
