"""Reading and writing 16-bit PCM WAV clips.

Multi-channel files are averaged down to mono on read. No resampling is
performed anywhere in the package; sample-rate mismatches are rejected by
the feature frontend instead.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CfAudioError

_INT16_SCALE = 32767.0


@dataclass(frozen=True)
class AudioClip:
    """A mono waveform with its sample rate. Samples are float64 in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise CfAudioError("AudioClip samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise CfAudioError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path: str | Path) -> AudioClip:
    """Read a 16-bit PCM WAV file, averaging channels to mono."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise CfAudioError(f"{path}: only 16-bit PCM WAV is supported")
        n_channels = w.getnchannels()
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _INT16_SCALE
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioClip(samples=data, sample_rate=rate)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a mono clip as 16-bit PCM WAV. Samples are clipped to [-1, 1]."""
    quantized = np.clip(np.round(clip.samples * _INT16_SCALE), -32768, 32767)
    payload = quantized.astype("<i2").tobytes()
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(payload)
