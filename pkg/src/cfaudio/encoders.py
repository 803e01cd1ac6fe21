"""Audio and text towers mapping inputs to a shared unit-norm embedding space.

The audio tower is trainable (a toy CNN for desk scale, or a frozen external
backbone with a trainable adapter on top). The text tower is always frozen;
the shipped one is a seeded hashed bag-of-tokens encoder, so text embeddings
are a pure function of the caption string and the encoder seed. All towers
emit L2-normalized float64 vectors.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import EncoderError
from .util import substream

_TOKEN_RE = re.compile(r"[a-z0-9']+")

BACKBONE_FILE_FORMAT = "cfaudio-backbone"


@dataclass(frozen=True)
class EncoderSpec:
    """Declarative description of one tower.

    ``backbone`` is ``"toy-cnn"`` / ``"hashed-bow"`` for the shipped towers,
    or a path to an exported backbone weight file (audio only), which is then
    loaded frozen with a trainable adapter on top.
    """

    kind: str
    backbone: str = ""
    d: int = 512
    trainable_parts: str = "adapter-only"
    seed: int = 0
    adapter_width: int = 128
    hash_dim: int = 4096
    channels: tuple[int, int, int] = (8, 16, 32)

    def __post_init__(self):
        if self.kind not in ("audio", "text"):
            raise EncoderError(f"unknown encoder kind {self.kind!r}")
        if self.trainable_parts not in ("adapter-only", "all", "none"):
            raise EncoderError(f"unknown trainable_parts {self.trainable_parts!r}")
        if self.kind == "text" and self.trainable_parts != "none":
            raise EncoderError("text towers are frozen: trainable_parts must be 'none'")
        if self.d < 1:
            raise EncoderError("embedding dimension must be >= 1")


def _normalize_rows(v: torch.Tensor) -> torch.Tensor:
    norms = v.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise EncoderError("cannot normalize a zero embedding")
    return v / norms


class HashedTextEncoder:
    """Frozen deterministic text tower: hashed bag-of-tokens -> linear -> unit norm.

    Tokenization is lowercase alphanumeric runs. Each token is hashed (CRC-32
    mixed with the encoder seed) into a fixed-size count vector, which is
    projected by a seeded Gaussian matrix and L2-normalized. Identical strings
    always yield bit-identical embeddings; there are no trainable parameters.
    """

    def __init__(self, d: int = 64, hash_dim: int = 4096, seed: int = 0):
        self.d = d
        self.hash_dim = hash_dim
        self.seed = seed
        rng = substream(seed, "text-projection")
        self._projection = rng.standard_normal((hash_dim, d))

    def _encode_one(self, caption: str) -> np.ndarray:
        # summed per caption over sorted hash buckets, so the result is
        # bit-identical regardless of what else is in the batch
        tokens = _TOKEN_RE.findall(caption.lower())
        if not tokens:
            raise EncoderError(f"caption has no tokens: {caption!r}")
        base = self.seed & 0xFFFFFFFF
        counts: dict[int, float] = {}
        for token in tokens:
            bucket = zlib.crc32(token.encode("utf-8"), base) % self.hash_dim
            counts[bucket] = counts.get(bucket, 0.0) + 1.0
        vector = np.zeros(self.d)
        for bucket in sorted(counts):
            vector += counts[bucket] * self._projection[bucket]
        return vector

    def encode(self, captions: Sequence[str]) -> torch.Tensor:
        """Encode captions to a (N, d) float64 tensor of unit vectors."""
        if len(captions) == 0:
            raise EncoderError("captions list is empty")
        for caption in captions:
            if not caption.strip():
                raise EncoderError("empty caption")
        vectors = torch.from_numpy(np.stack([self._encode_one(c) for c in captions]))
        return _normalize_rows(vectors)


class TextEncoderCache:
    """Memoized frozen-text encoding; hits are bit-identical to recomputation."""

    def __init__(self, encoder: HashedTextEncoder):
        self.encoder = encoder
        self._store: dict[str, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self._store)

    def encode(self, captions: Sequence[str]) -> torch.Tensor:
        missing = [c for c in captions if c not in self._store]
        if missing:
            fresh = self.encoder.encode(missing)
            for caption, vector in zip(missing, fresh):
                self._store[caption] = vector
        return torch.stack([self._store[c] for c in captions])


def encode_text(captions: Sequence[str], cache: TextEncoderCache) -> torch.Tensor:
    """Encode captions through the frozen text tower, consulting the cache."""
    return cache.encode(captions)


class _ToyConvFeatures(nn.Module):
    """Three conv blocks over (time, mel) with average pooling between them."""

    def __init__(self, channels: tuple[int, int, int] = (8, 16, 32)):
        super().__init__()
        self.channels = tuple(channels)
        ins = (1,) + self.channels[:-1]
        self.blocks = nn.ModuleList(
            nn.Conv2d(c_in, c_out, kernel_size=3, padding=1) for c_in, c_out in zip(ins, self.channels)
        )
        self.pool = nn.AvgPool2d(2, ceil_mode=True)
        self.feature_dim = self.channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.blocks:
            x = self.pool(torch.relu(conv(x)))
        return x.mean(dim=(2, 3))


def _seeded_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                fan_in = param[0].numel() if param.dim() > 1 else param.numel()
                scale = (2.0 / max(fan_in, 1)) ** 0.5
                param.copy_(torch.randn(param.shape, generator=gen, dtype=torch.float64) * scale)


class ToyAudioEncoder(nn.Module):
    """Small trainable CNN audio tower for desk-scale experiments.

    Input: (N, n_frames, n_mels) log-Mel batches. Output: (N, d) unit vectors.
    Runs in float64 so training traces are reproducible bit-for-bit.
    """

    def __init__(self, d: int = 64, channels: tuple[int, int, int] = (8, 16, 32), seed: int = 0):
        super().__init__()
        self.features = _ToyConvFeatures(channels)
        self.head = nn.Linear(self.features.feature_dim, d)
        self.d = d
        self.to(torch.float64)
        _seeded_init(self, seed)

    def adapter_modules(self) -> list[nn.Module]:
        return [self.head]

    def backbone_modules(self) -> list[nn.Module]:
        return [self.features]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3:
            raise EncoderError(f"expected (batch, frames, mels) input, got shape {tuple(x.shape)}")
        pooled = self.features(x.unsqueeze(1))
        return _normalize_rows(self.head(pooled))


class AdapterAudioEncoder(nn.Module):
    """Frozen pretrained backbone with a small trainable adapter on top.

    The adapter is one linear layer, a nonlinearity, and a linear projection
    to the shared dimension; its size is independent of the backbone's.
    """

    def __init__(self, backbone: nn.Module, backbone_dim: int, d: int, adapter_width: int = 128, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.adapter = nn.Sequential(
            nn.Linear(backbone_dim, adapter_width),
            nn.ReLU(),
            nn.Linear(adapter_width, d),
        )
        self.d = d
        self.to(torch.float64)
        _seeded_init(self.adapter, seed)

    def adapter_modules(self) -> list[nn.Module]:
        return [self.adapter]

    def backbone_modules(self) -> list[nn.Module]:
        return [self.backbone]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3:
            raise EncoderError(f"expected (batch, frames, mels) input, got shape {tuple(x.shape)}")
        return _normalize_rows(self.adapter(self.backbone(x.unsqueeze(1))))


def apply_trainable_parts(encoder: nn.Module, parts: str) -> None:
    """Apply a freezing policy: 'all', 'adapter-only', or 'none'."""
    for p in encoder.parameters():
        p.requires_grad_(parts == "all")
    if parts == "adapter-only":
        for module in encoder.adapter_modules():
            for p in module.parameters():
                p.requires_grad_(True)


def encode_audio(encoder: nn.Module, features: Sequence[np.ndarray] | torch.Tensor) -> torch.Tensor:
    """Run a batch of equally-shaped spectrogram feature arrays through the audio tower."""
    if isinstance(features, torch.Tensor):
        batch = features.to(torch.float64)
    else:
        if len(features) == 0:
            raise EncoderError("empty feature batch")
        shapes = {f.shape for f in features}
        if len(shapes) != 1:
            raise EncoderError(f"spectrogram shapes differ within batch: {sorted(shapes)}")
        batch = torch.from_numpy(np.stack(features))
    return encoder(batch)


def count_trainable_parameters(encoder) -> int:
    """Exact count of trainable scalars; 0 for any frozen (text) tower."""
    if isinstance(encoder, nn.Module):
        return sum(p.numel() for p in encoder.parameters() if p.requires_grad)
    return 0


def export_backbone(encoder: ToyAudioEncoder, path: str | Path) -> None:
    """Write the feature stack of a toy encoder as a loadable frozen backbone."""
    torch.save(
        {
            "format": BACKBONE_FILE_FORMAT,
            "arch": "toy-conv-features",
            "channels": list(encoder.features.channels),
            "feature_dim": encoder.features.feature_dim,
            "state": encoder.features.state_dict(),
        },
        path,
    )


def load_backbone(path: str | Path) -> tuple[nn.Module, int]:
    blob = torch.load(path, weights_only=True)
    if blob.get("format") != BACKBONE_FILE_FORMAT or blob.get("arch") != "toy-conv-features":
        raise EncoderError(f"{path}: not a recognized backbone file")
    module = _ToyConvFeatures(tuple(blob["channels"]))
    module.to(torch.float64)
    module.load_state_dict(blob["state"])
    return module, int(blob["feature_dim"])


def build_audio_encoder(spec: EncoderSpec) -> nn.Module:
    """Construct the audio tower described by a spec and apply its freezing policy."""
    if spec.kind != "audio":
        raise EncoderError("spec is not an audio encoder spec")
    if spec.backbone == "toy-cnn":
        encoder: nn.Module = ToyAudioEncoder(d=spec.d, channels=spec.channels, seed=spec.seed)
    elif Path(spec.backbone).is_file():
        backbone, feature_dim = load_backbone(spec.backbone)
        encoder = AdapterAudioEncoder(
            backbone, feature_dim, spec.d, adapter_width=spec.adapter_width, seed=spec.seed
        )
    else:
        raise EncoderError(f"unknown audio backbone {spec.backbone!r}")
    apply_trainable_parts(encoder, spec.trainable_parts)
    return encoder


def build_text_encoder(spec: EncoderSpec) -> HashedTextEncoder:
    if spec.kind != "text":
        raise EncoderError("spec is not a text encoder spec")
    if spec.backbone != "hashed-bow":
        raise EncoderError(f"unknown text backbone {spec.backbone!r}")
    return HashedTextEncoder(d=spec.d, hash_dim=spec.hash_dim, seed=spec.seed)
