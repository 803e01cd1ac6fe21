"""Batched training of the audio tower against factual and counterfactual text.

Randomness is counter-based: the batch composition for epoch ``e`` and the
crop offsets for step ``s`` are pure functions of (seed, e) and (seed, s)
respectively. This makes training runs bit-reproducible in double precision
and makes resuming from a checkpoint trivially equivalent to an
uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .audio_io import AudioClip, read_wav
from .encoders import (
    EncoderSpec,
    TextEncoderCache,
    build_audio_encoder,
    build_text_encoder,
)
from .errors import ConfigError, ConfigHashMismatchError, TrainingError
from .frontend import FrontendConfig, crop_or_pad, log_mel
from .losses import LEARNABLE_TAU_INIT, TAU_MAX, LossBreakdown, LossConfig, total_loss
from .manifest import CaptionPair, expand_pairs, load_manifest
from .util import config_digest, substream

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"
FINAL_CHECKPOINT_NAME = "checkpoint_final.pt"


def _default_audio_spec() -> EncoderSpec:
    return EncoderSpec(kind="audio", backbone="toy-cnn", d=64, trainable_parts="all")


def _default_text_spec() -> EncoderSpec:
    return EncoderSpec(kind="text", backbone="hashed-bow", d=64, trainable_parts="none")


@dataclass(frozen=True)
class TrainConfig:
    manifest: str = ""
    batch_size: int = 16
    steps: int = 2000
    lr: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0
    checkpoint_interval: int = 500
    loss: LossConfig = field(default_factory=LossConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    audio_encoder: EncoderSpec = field(default_factory=_default_audio_spec)
    text_encoder: EncoderSpec = field(default_factory=_default_text_spec)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if self.audio_encoder.d != self.text_encoder.d:
            raise ConfigError(
                f"audio and text towers disagree on d: "
                f"{self.audio_encoder.d} vs {self.text_encoder.d}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["loss"] = LossConfig(**data["loss"])
        data["frontend"] = FrontendConfig(**data["frontend"])
        for key in ("audio_encoder", "text_encoder"):
            spec = dict(data[key])
            spec["channels"] = tuple(spec["channels"])
            data[key] = EncoderSpec(**spec)
        return cls(**data)

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass
class Checkpoint:
    """Self-describing training state: everything needed to resume or evaluate."""

    step: int
    model_state: dict
    optimizer_state: dict | None
    log_tau: float | None
    config: dict
    config_hash: str
    rng: dict

    def save(self, path: str | Path) -> None:
        torch.save(dataclasses.asdict(self), path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blob = torch.load(path, weights_only=False)
        return cls(**blob)


def _epoch_batches(
    pairs: Sequence[CaptionPair], batch_size: int, rng: np.random.Generator
) -> list[list[int]]:
    """Shuffle one epoch and group it into batches, avoiding two pairs with
    the same audio clip in one batch while alternatives remain.

    Slots prefer the audio path with the highest remaining multiplicity so
    multi-caption clips are spread across batches instead of piling up at
    the epoch tail; with unique paths this reduces to the plain shuffle.
    """
    pool = list(rng.permutation(len(pairs)))
    multiplicity = Counter(pairs[idx].audio_path for idx in pool)
    batches: list[list[int]] = []
    while len(pool) >= batch_size:
        batch: list[int] = []
        audios: set[str] = set()
        while len(batch) < batch_size:
            candidates = [
                k for k, idx in enumerate(pool) if pairs[idx].audio_path not in audios
            ]
            if candidates:
                pick = max(
                    candidates, key=lambda k: (multiplicity[pairs[pool[k]].audio_path], -k)
                )
            else:
                pick = 0
            idx = pool.pop(pick)
            batch.append(idx)
            multiplicity[pairs[idx].audio_path] -= 1
            audios.add(pairs[idx].audio_path)
        batches.append(batch)
    return batches


def make_batches(pairs: Sequence[CaptionPair], config: TrainConfig) -> Iterator[list[CaptionPair]]:
    """Yield ``config.steps`` training batches.

    Sampling is uniform without replacement within an epoch; the whole
    sequence is a pure function of the seed. A trailing partial epoch batch
    is dropped.
    """
    if len(pairs) < config.batch_size:
        raise ConfigError(f"need at least {config.batch_size} pairs, have {len(pairs)}")
    if config.loss.w1 > 0 and any(p.counterfactual is None for p in pairs):
        missing = sum(p.counterfactual is None for p in pairs)
        raise ConfigError(
            f"w1 > 0 requires counterfactuals for every pair; {missing} missing"
        )
    per_epoch = len(pairs) // config.batch_size
    for step in range(config.steps):
        epoch, offset = divmod(step, per_epoch)
        if offset == 0:
            batches = _epoch_batches(pairs, config.batch_size, substream(config.seed, "batch", epoch))
        yield [pairs[i] for i in batches[offset]]


def batch_for_step(pairs: Sequence[CaptionPair], config: TrainConfig, step: int) -> list[CaptionPair]:
    """The batch any run of this config uses at a given step (stateless access)."""
    per_epoch = len(pairs) // config.batch_size
    epoch, offset = divmod(step, per_epoch)
    batches = _epoch_batches(pairs, config.batch_size, substream(config.seed, "batch", epoch))
    return [pairs[i] for i in batches[offset]]


class FeatureExtractor:
    """Waveform loading, cropping, and log-Mel extraction with caching.

    Spectrograms of clips at or below the segment length are deterministic,
    so they are cached per path; longer clips are recomputed per step since
    the crop offset is random.
    """

    def __init__(self, config: FrontendConfig):
        self.config = config
        self._waveforms: dict[str, AudioClip] = {}
        self._features: dict[str, np.ndarray] = {}

    def waveform(self, path: str) -> AudioClip:
        if path not in self._waveforms:
            self._waveforms[path] = read_wav(path)
        return self._waveforms[path]

    def features(self, path: str, rng: np.random.Generator | None) -> np.ndarray:
        clip = self.waveform(path)
        deterministic = len(clip.samples) <= self.config.segment_samples
        if deterministic and path in self._features:
            return self._features[path]
        segment = crop_or_pad(clip, self.config, rng)
        frames = log_mel(segment, self.config).frames
        if deterministic:
            self._features[path] = frames
        return frames

    def batch_features(self, paths: Sequence[str], rng: np.random.Generator | None) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.features(p, rng) for p in paths]))


def duplicate_positive_mask(batch: Sequence[CaptionPair]) -> torch.Tensor | None:
    """Mask of off-diagonal (text, audio) cells that are true positives
    because two pairs in the batch share an audio clip."""
    n = len(batch)
    mask = torch.zeros((n, n), dtype=torch.bool)
    found = False
    for i in range(n):
        for j in range(n):
            if i != j and batch[i].audio_path == batch[j].audio_path:
                mask[i, j] = True
                found = True
    return mask if found else None


def train_step(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None,
    features: torch.Tensor,
    text_emb: torch.Tensor,
    cf_emb: torch.Tensor | None,
    loss_config: LossConfig,
    log_tau: torch.Tensor | None = None,
    positive_mask: torch.Tensor | None = None,
    batch_ids: Sequence[str] = (),
) -> LossBreakdown:
    """One gradient step on the trainable parameters; returns the loss
    breakdown evaluated before the update."""
    E_a = model(features)
    tau = torch.clamp(torch.exp(log_tau), max=TAU_MAX) if log_tau is not None else None
    breakdown = total_loss(
        E_a, text_emb, loss_config, E_t_cf=cf_emb, tau=tau, positive_mask=positive_mask
    )
    if not math.isfinite(float(breakdown.total.detach())):
        raise TrainingError(f"non-finite loss on batch of entries: {', '.join(batch_ids)}")
    if optimizer is not None and breakdown.total.requires_grad:
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
    return breakdown


def _build_optimizer(config: TrainConfig, params: list[torch.Tensor]) -> torch.optim.Optimizer | None:
    if not params:
        return None
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    return torch.optim.SGD(params, lr=config.lr)


def fit(
    config: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | Checkpoint | None = None,
) -> Checkpoint:
    """Run the training loop, checkpointing periodically and logging metrics.

    Writes one metrics record per step (step, clap, angle, factual, total)
    to ``metrics.jsonl`` under ``out_dir``, checkpoints every
    ``checkpoint_interval`` steps, and returns the final checkpoint. Pass
    ``resume_from`` to continue an interrupted run; the checkpoint's config
    hash must match.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = config.digest()

    manifest = load_manifest(config.manifest)
    pairs = expand_pairs(manifest)
    if config.loss.w1 > 0 and any(p.counterfactual is None for p in pairs):
        missing = sum(p.counterfactual is None for p in pairs)
        raise ConfigError(f"w1 > 0 requires counterfactuals for every pair; {missing} missing")
    if len(pairs) < config.batch_size:
        raise ConfigError(f"need at least {config.batch_size} pairs, have {len(pairs)}")

    model = build_audio_encoder(config.audio_encoder)
    text_cache = TextEncoderCache(build_text_encoder(config.text_encoder))
    extractor = FeatureExtractor(config.frontend)

    log_tau: torch.Tensor | None = None
    if config.loss.learnable_tau:
        log_tau = torch.tensor(
            math.log(LEARNABLE_TAU_INIT), dtype=torch.float64, requires_grad=True
        )
    params = [p for p in model.parameters() if p.requires_grad]
    if log_tau is not None:
        params.append(log_tau)
    optimizer = _build_optimizer(config, params)

    start_step = 0
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else Checkpoint.load(resume_from)
        if ckpt.config_hash != config_hash:
            raise ConfigHashMismatchError(config_hash, ckpt.config_hash)
        model.load_state_dict(ckpt.model_state)
        if optimizer is not None and ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        if log_tau is not None and ckpt.log_tau is not None:
            with torch.no_grad():
                log_tau.fill_(ckpt.log_tau)
        start_step = ckpt.step

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            step=step,
            model_state={k: v.clone() for k, v in model.state_dict().items()},
            optimizer_state=optimizer.state_dict() if optimizer is not None else None,
            log_tau=float(log_tau.detach()) if log_tau is not None else None,
            config=config.to_dict(),
            config_hash=config_hash,
            rng={"scheme": "counter-based", "seed": config.seed, "step": step},
        )

    metrics_path = out_dir / METRICS_NAME
    mode = "a" if start_step > 0 else "w"
    need_cf = all(p.counterfactual is not None for p in pairs)
    with open(metrics_path, mode, encoding="utf-8") as metrics_file:
        for step in range(start_step, config.steps):
            batch = batch_for_step(pairs, config, step)
            crop_rng = substream(config.seed, "crop", step)
            features = extractor.batch_features([p.audio_path for p in batch], crop_rng)
            text_emb = text_cache.encode([p.caption for p in batch])
            cf_emb = text_cache.encode([p.counterfactual for p in batch]) if need_cf else None
            positive_mask = (
                duplicate_positive_mask(batch) if config.loss.include_clap_term else None
            )
            breakdown = train_step(
                model,
                optimizer,
                features,
                text_emb,
                cf_emb,
                config.loss,
                log_tau=log_tau,
                positive_mask=positive_mask,
                batch_ids=[p.entry_id for p in batch],
            )
            record = {"step": step, **breakdown.floats()}
            metrics_file.write(json.dumps(record) + "\n")
            done = step + 1
            if done % config.checkpoint_interval == 0 and done < config.steps:
                snapshot(done).save(out_dir / f"checkpoint_{done:06d}.pt")

    final = snapshot(config.steps)
    final.save(out_dir / FINAL_CHECKPOINT_NAME)
    return final


@dataclass
class ModelBundle:
    """A checkpoint rehydrated for evaluation: config, towers, text cache."""

    config: TrainConfig
    config_hash: str
    step: int
    model: torch.nn.Module
    text_cache: TextEncoderCache


def load_model(checkpoint: str | Path | Checkpoint) -> ModelBundle:
    """Rebuild the towers from a checkpoint and verify its config hash."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    config = TrainConfig.from_dict(ckpt.config)
    if config.digest() != ckpt.config_hash:
        raise ConfigHashMismatchError(config.digest(), ckpt.config_hash)
    model = build_audio_encoder(config.audio_encoder)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return ModelBundle(
        config=config,
        config_hash=ckpt.config_hash,
        step=ckpt.step,
        model=model,
        text_cache=TextEncoderCache(build_text_encoder(config.text_encoder)),
    )
