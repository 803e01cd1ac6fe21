"""One canonical run configuration file for the whole pipeline.

A run config is a YAML mapping with one section per subsystem. Unknown keys
anywhere are a hard error, so typos never silently fall back to defaults.
The config hash is computed over the fully resolved configuration (defaults
applied, derived seeds filled in), so it is stable under key reordering and
comments. All randomness derives from the single top-level ``seed`` through
named substreams.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoders import EncoderSpec
from .errors import ConfigError
from .frontend import FrontendConfig
from .losses import LossConfig
from .synthetic import SyntheticCorpusSpec
from .trainer import TrainConfig
from .util import config_digest, substream


def derive_seed(seed: int, name: str) -> int:
    """Stable per-purpose seed derived from the top-level run seed."""
    return int(substream(seed, name).integers(0, 2**31))


@dataclass(frozen=True)
class SynthSection:
    classes: int = 8
    clips_per_class: int = 16
    eval_clips_per_class: int = 4
    clip_seconds: float = 2.0
    sample_rate: int = 16000
    seed: int | None = None


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 16
    steps: int = 2000
    lr: float = 0.05
    optimizer: str = "sgd"
    checkpoint_interval: int = 500
    manifest: str = ""


@dataclass(frozen=True)
class AugmentSection:
    generator: str = "rule-oracle"
    policy: str = "any"
    force: bool = False
    seed: int | None = None


@dataclass(frozen=True)
class BackendSection:
    base_url: str = ""
    model_id: str = ""
    api_key_env: str = "CFAUDIO_API_KEY"
    timeout: float = 60.0
    min_interval: float = 0.0


@dataclass(frozen=True)
class EvalSection:
    ks: tuple[int, ...] = (1, 10)
    template: str = "This is the sound of a {label}"
    all_captions: bool = False
    projection: str = "tsne"


def _toy_frontend() -> FrontendConfig:
    return FrontendConfig(
        sample_rate=16000, hop=160, window=512, n_mels=64,
        f_min=50.0, f_max=7800.0, segment_seconds=2.0,
    )


def _toy_audio_encoder() -> EncoderSpec:
    return EncoderSpec(kind="audio", backbone="toy-cnn", d=64, trainable_parts="all")


def _toy_text_encoder() -> EncoderSpec:
    return EncoderSpec(kind="text", backbone="hashed-bow", d=64, trainable_parts="none")


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration for every stage of a run.

    Section defaults describe the desk-scale setup (16 kHz synthetic corpus,
    toy towers); the production-scale frontend parameterization is the
    library default of ``FrontendConfig`` itself.
    """

    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    frontend: FrontendConfig = field(default_factory=_toy_frontend)
    audio_encoder: EncoderSpec = field(default_factory=_toy_audio_encoder)
    text_encoder: EncoderSpec = field(default_factory=_toy_text_encoder)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    backend: BackendSection = field(default_factory=BackendSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self) -> dict:
        data = dataclasses.asdict(self)
        data["synth"]["seed"] = self.synth_seed()
        data["augment"]["seed"] = self.augment_seed()
        return data

    def digest(self) -> str:
        return config_digest(self.resolved())

    def synth_seed(self) -> int:
        return self.synth.seed if self.synth.seed is not None else derive_seed(self.seed, "synth")

    def augment_seed(self) -> int:
        return (
            self.augment.seed if self.augment.seed is not None else derive_seed(self.seed, "oracle")
        )

    def projection_seed(self) -> int:
        return derive_seed(self.seed, "projection")

    def synth_spec(self, held_out: bool = False) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(
            n_classes=self.synth.classes,
            clips_per_class=(
                self.synth.eval_clips_per_class if held_out else self.synth.clips_per_class
            ),
            clip_seconds=self.synth.clip_seconds,
            sample_rate=self.synth.sample_rate,
            seed=derive_seed(self.seed, "synth-eval") if held_out else self.synth_seed(),
        )

    def train_config(self, manifest: str | None = None) -> TrainConfig:
        return TrainConfig(
            manifest=manifest if manifest is not None else self.train.manifest,
            batch_size=self.train.batch_size,
            steps=self.train.steps,
            lr=self.train.lr,
            optimizer=self.train.optimizer,
            seed=self.seed,
            checkpoint_interval=self.train.checkpoint_interval,
            loss=self.loss,
            frontend=self.frontend,
            audio_encoder=self.audio_encoder,
            text_encoder=self.text_encoder,
        )


_SECTION_TYPES = {
    "synth": SynthSection,
    "frontend": FrontendConfig,
    "loss": LossConfig,
    "train": TrainSection,
    "augment": AugmentSection,
    "backend": BackendSection,
    "eval": EvalSection,
}

_TUPLE_FIELDS = {"ks", "channels"}


def _build_section(name: str, cls, data: dict, defaults):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(sorted(unknown))}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in data.items()}
    base = dataclasses.asdict(defaults)
    base.update(kwargs)
    if "channels" in base and isinstance(base["channels"], list):
        base["channels"] = tuple(base["channels"])
    try:
        return cls(**base)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def run_config_from_mapping(data: dict) -> RunConfig:
    """Build a RunConfig from a parsed mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("run config must be a mapping")
    defaults = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")

    kwargs: dict = {}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = data["seed"]
    seed = kwargs.get("seed", defaults.seed)

    for name, cls in _SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data[name], getattr(defaults, name))

    for name, kind, default in (
        ("audio_encoder", "audio", defaults.audio_encoder),
        ("text_encoder", "text", defaults.text_encoder),
    ):
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        section = dict(raw)
        section.setdefault("kind", kind)
        if section["kind"] != kind:
            raise ConfigError(f"section {name!r} must have kind {kind!r}")
        if "seed" not in section:
            section["seed"] = derive_seed(seed, f"{kind}-init")
        kwargs[name] = _build_section(name, EncoderSpec, section, default)

    return RunConfig(**kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    return run_config_from_mapping(data)
