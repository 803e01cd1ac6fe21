"""Procedural desk-scale audio-caption corpus.

Each class owns a disjoint low-frequency chord and each context a disjoint
high-frequency pair, so a small encoder can separate both factors from
log-Mel features within minutes of CPU training. Captions follow a fixed
template and counterfactual captions swap the class term for a different
class. Generation is a pure function of its parameters: re-runs are
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, write_wav
from .errors import CfAudioError
from .manifest import DatasetManifest, ManifestEntry, load_manifest, save_manifest
from .util import substream

CLASS_TERMS = (
    "piano", "gun", "dog", "car", "bird", "train",
    "storm", "crowd", "siren", "drum", "flute", "bell",
)

CONTEXT_TERMS = (
    "park", "street", "hall", "kitchen", "forest", "station", "garage", "cave",
)

CAPTION_TEMPLATE = "the sound of a {cls} in the {ctx}"

MANIFEST_NAME = "manifest.jsonl"
LABELS_NAME = "labels.json"

_CLASS_BASE_HZ = 250.0
_CLASS_STEP_HZ = 350.0
_CONTEXT_BASE_HZ = 3300.0
_CONTEXT_STEP_HZ = 380.0
_NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_classes: int
    clips_per_class: int
    clip_seconds: float = 2.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise CfAudioError("n_classes must be >= 2")
        if self.n_classes > len(CLASS_TERMS):
            raise CfAudioError(f"at most {len(CLASS_TERMS)} classes are available")
        if self.clips_per_class < 1:
            raise CfAudioError("clips_per_class must be >= 1")
        if self.sample_rate <= 0:
            raise CfAudioError("sample_rate must be positive")
        top = max(_class_chord(self.n_classes - 1).max(), _context_tones(len(CONTEXT_TERMS) - 1).max())
        if top >= 0.48 * self.sample_rate:
            raise CfAudioError(
                f"sample rate {self.sample_rate} Hz too low for {self.n_classes} "
                f"classes (needs components up to {top:.0f} Hz)"
            )


def _class_chord(class_idx: int) -> np.ndarray:
    base = _CLASS_BASE_HZ + _CLASS_STEP_HZ * class_idx
    return np.array([base, base + 80.0, base + 160.0])


def _context_tones(context_idx: int) -> np.ndarray:
    base = _CONTEXT_BASE_HZ + _CONTEXT_STEP_HZ * context_idx
    return np.array([base, base + 120.0])


def _render_clip(spec: SyntheticCorpusSpec, class_idx: int, clip_idx: int) -> AudioClip:
    rng = substream(spec.seed, "synth-audio", class_idx, clip_idx)
    n = int(round(spec.clip_seconds * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    signal = np.zeros(n)
    for freq in _class_chord(class_idx):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        signal += 0.18 * np.sin(2.0 * np.pi * freq * t + phase)
    for freq in _context_tones(clip_idx % len(CONTEXT_TERMS)):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        signal += 0.12 * np.sin(2.0 * np.pi * freq * t + phase)
    signal += rng.normal(0.0, _NOISE_SIGMA, n)
    return AudioClip(samples=signal, sample_rate=spec.sample_rate)


def entry_class(entry_id: str) -> str:
    """Class term encoded in a synthetic entry id (``"<class>_<index>"``)."""
    return entry_id.rsplit("_", 1)[0]


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir: str | Path) -> DatasetManifest:
    """Write the corpus (WAV files, manifest, labels file) and return the manifest.

    Layout under ``out_dir``: ``audio/<class>_<index>.wav``, ``manifest.jsonl``,
    and ``labels.json`` holding the class list and per-entry ground truth for
    zero-shot evaluation.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    classes = CLASS_TERMS[: spec.n_classes]
    entries: list[ManifestEntry] = []
    truth: dict[str, str] = {}
    for c, cls in enumerate(classes):
        for j in range(spec.clips_per_class):
            entry_id = f"{cls}_{j:03d}"
            rel_path = f"audio/{entry_id}.wav"
            write_wav(out_dir / rel_path, _render_clip(spec, c, j))

            ctx = CONTEXT_TERMS[j % len(CONTEXT_TERMS)]
            caption = CAPTION_TEMPLATE.format(cls=cls, ctx=ctx)
            cf_rng = substream(spec.seed, "synth-cf", c, j)
            other = int(cf_rng.integers(0, spec.n_classes - 1))
            cf_class = classes[other if other < c else other + 1]
            counterfactual = CAPTION_TEMPLATE.format(cls=cf_class, ctx=ctx)

            entries.append(
                ManifestEntry(
                    id=entry_id,
                    audio_path=rel_path,
                    captions=(caption,),
                    counterfactuals=(counterfactual,),
                )
            )
            truth[entry_id] = cls

    manifest = DatasetManifest(entries=tuple(entries), dataset_name="synthetic", root=out_dir)
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    labels_payload = {"classes": list(classes), "truth": truth}
    (out_dir / LABELS_NAME).write_text(
        json.dumps(labels_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return load_manifest(out_dir / MANIFEST_NAME)
