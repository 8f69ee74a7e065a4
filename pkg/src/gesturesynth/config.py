"""Run configuration: every architectural, loss, and data hyperparameter.

A run directory always receives the exact merged config that produced
its artifacts.  Hydration rejects unknown keys and wrong types, naming
the offending field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

__all__ = [
    "ConfigError",
    "CorpusConfig",
    "ModelConfig",
    "TrainConfig",
    "MetricsConfig",
    "RunConfig",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "load_run_config",
    "apply_overrides",
]


class ConfigError(ValueError):
    """Configuration rejected; the message names the field."""


@dataclass
class CorpusConfig:
    n_clips: int = 16
    min_frames: int = 45
    max_frames: int = 75
    n_speakers: int = 2
    skeleton: str = "desk11"
    base_amplitude: float = 0.08
    amplitude_gap: float = 0.5
    base_frequency: float = 0.8
    frequency_gap: float = 0.3
    strokes_per_clip: int = 4
    degraded_fraction: float = 0.0
    confidence_noise: float = 0.02
    vocab_size: int = 64
    tokens_per_clip: int = 12
    train_fraction: float = 0.7
    val_fraction: float = 0.15


@dataclass
class ModelConfig:
    # framing
    fps: int = 15
    n_init_frames: int = 4        # previous-gesture frames fed to the generator
    n_gen_frames: int = 30        # frames synthesized per sequence
    window_frames: int = 4        # gesture window quantized as one unit
    audio_rate: int = 16000
    audio_window: int = 4000      # samples per quantized audio segment (0.25 s)
    audio_pool_stride: int = 20   # fixed averaging front-end inside the audio encoder
    # quantization
    codebook_size: int = 512
    latent_dim: int = 8
    bottom_rows: int = 4
    top_rows: int = 2
    vq_hidden: int = 64
    alpha: float = 0.25           # commitment weight
    huber_delta: float = 1.0
    # adversarial
    adv_delta: float = 2.0
    adv_p: float = 6.0
    adv_beta: float = 1.0
    adv_gamma: float = 1.0
    critic_hidden: int = 128
    critic_leak: float = 0.2
    flip_adversarial_sign: bool = False
    # input modalities
    code_embed_dim: int = 4
    text_dim: int = 16
    text_max_tokens: int = 300
    onset_dim: int = 4
    onset_hidden: int = 8
    context_bands: int = 8
    speaker_embed_dim: int = 8
    style_dim: int = 8
    spd_hidden: int = 32
    # sequence model
    model_dim: int = 0            # 0 -> use the fused input dimension
    max_heads: int = 12
    transformer_hidden: int = 64
    # temporal aligner
    fusion_dim: int = 32
    aligner_hidden: int = 64
    quantize_aligner_latents: bool = True
    # ablation switches
    use_gru: bool = True
    use_transformer: bool = True
    use_vq_decoder: bool = True
    use_temporal_aligner: bool = True
    # loss weights
    pi1: float = 2.0
    pi2: float = 20.0
    pi3: float = 20.0
    pi4: float = 20.0
    pi5: float = 0.004
    pi6: float = 20.0
    style_epsilon: float = 5.0
    literal_dist_sign: bool = False
    # data quality
    tau: float = 0.05


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 50
    lr_initial: float = 1e-4
    lr_decay: float = 0.75
    lr_step_epochs: int = 20
    lr_floor: float = 1e-5
    dropout_increment: float = 0.05
    dropout_step_epochs: int = 25
    dropout_cap: float = 0.3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    vq_epochs: int = 30
    vq_batch_size: int = 64
    vq_lr: float = 1e-3
    vq_audio_epochs: int = 5
    fragment_stride: int = 8


@dataclass
class MetricsConfig:
    feature_dim: int = 32
    extractor_hidden: int = 64
    extractor_epochs: int = 50
    extractor_window: int = 34
    extractor_lr: float = 1e-3
    diversity_pairs: int = 500
    diversity_repeats: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


def _hydrate(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config field {where!r}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        where = f"{path}.{name}" if path else name
        if name in _SECTION_TYPES and cls is RunConfig:
            kwargs[name] = _hydrate(_SECTION_TYPES[name], value, where)
            continue
        kwargs[name] = _coerce(value, f.type, where)
    return cls(**kwargs)


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "metrics": MetricsConfig,
}


def _coerce(value, type_name, where):
    # dataclass fields carry string annotations under __future__ annotations
    tname = type_name if isinstance(type_name, str) else type_name.__name__
    if tname == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tname == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tname == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tname == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tname}")


def config_from_dict(data):
    return _hydrate(RunConfig, data, "")


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_hash(cfg):
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_run_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})")
    return config_from_dict(data)


def apply_overrides(cfg, overrides):
    """Apply ``section.field=value`` strings on top of a config."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        cursor = data
        for p in parts[:-1]:
            if p not in cursor or not isinstance(cursor[p], dict):
                raise ConfigError(f"unknown config field {key!r}")
            cursor = cursor[p]
        leaf = parts[-1]
        if leaf not in cursor:
            raise ConfigError(f"unknown config field {key!r}")
        cursor[leaf] = _parse_literal(raw)
    return config_from_dict(data)


def _parse_literal(raw):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw
