"""Waveform to log-Mel spectrogram conversion.

Pinned conventions (the shape and value contracts every test relies on):

* centered frames with reflect padding (zero padding when the signal is
  shorter than half a window), so ``n_frames = 1 + floor(n_samples / hop)``;
* periodic Hann window, FFT size equal to the window length;
* Slaney-style Mel filterbank, area-normalized;
* natural log of Mel power, floored at 1e-10 so all values are finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio_io import AudioClip
from .errors import FrontendError, SampleRateMismatchError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 32000
    hop: int = 320
    window: int = 1024
    n_mels: int = 64
    f_min: float = 50.0
    f_max: float = 14000.0
    segment_seconds: float = 10.0

    def __post_init__(self):
        if self.hop <= 0 or self.window <= 0:
            raise FrontendError("hop and window must be positive")
        if self.hop > self.window:
            raise FrontendError("hop must not exceed window")
        if self.n_mels < 1:
            raise FrontendError("n_mels must be >= 1")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise FrontendError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.segment_seconds <= 0:
            raise FrontendError("segment_seconds must be positive")

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-power Mel features, shape (n_frames, n_mels)."""

    frames: np.ndarray
    frame_rate: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape


def hz_to_mel(freq) -> np.ndarray:
    """Slaney Mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    mel = freq / (200.0 / 3.0)
    log_region = freq >= 1000.0
    logstep = np.log(6.4) / 27.0
    mel = np.where(log_region, 15.0 + np.log(np.maximum(freq, 1e-12) / 1000.0) / logstep, mel)
    return mel


def mel_to_hz(mel) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    freq = mel * (200.0 / 3.0)
    logstep = np.log(6.4) / 27.0
    log_region = mel >= 15.0
    return np.where(log_region, 1000.0 * np.exp(logstep * (mel - 15.0)), freq)


@lru_cache(maxsize=8)
def mel_filterbank(
    sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float
) -> np.ndarray:
    """Triangular Mel filterbank, shape (1 + n_fft // 2, n_mels).

    Filters are triangles with corners at successive Mel-spaced frequencies,
    scaled so each integrates to the same area (Slaney normalization).
    """
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(1 + n_fft // 2) * (sample_rate / n_fft)

    fdiff = np.diff(hz_points)
    ramps = hz_points[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1][:, None]
    upper = ramps[2:] / fdiff[1:][:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_points[2 : n_mels + 2] - hz_points[:n_mels]))[:, None]
    return np.ascontiguousarray(weights.T)


def _hann_periodic(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / length))


def crop_or_pad(
    clip: AudioClip, config: FrontendConfig, rng: np.random.Generator | None = None
) -> AudioClip:
    """Force a clip to exactly ``segment_seconds`` of audio.

    Longer clips are cut to a contiguous segment: at an offset drawn from
    ``rng`` when one is supplied (training), or centered when ``rng`` is None
    (deterministic evaluation). Shorter clips are right-padded with zeros;
    exact-length clips pass through unchanged.
    """
    if clip.sample_rate != config.sample_rate:
        raise SampleRateMismatchError(clip.sample_rate, config.sample_rate)
    target = config.segment_samples
    n = len(clip.samples)
    if n == target:
        return clip
    if n > target:
        if rng is not None:
            offset = int(rng.integers(0, n - target + 1))
        else:
            offset = (n - target) // 2
        return AudioClip(samples=clip.samples[offset : offset + target], sample_rate=clip.sample_rate)
    padded = np.zeros(target, dtype=np.float64)
    padded[:n] = clip.samples
    return AudioClip(samples=padded, sample_rate=clip.sample_rate)


def log_mel(clip: AudioClip, config: FrontendConfig) -> MelSpectrogram:
    """Compute the log-power Mel spectrogram of a clip.

    Deterministic: identical (clip, config) inputs produce bit-identical
    output. Raises on empty clips and sample-rate mismatches.
    """
    if clip.sample_rate != config.sample_rate:
        raise SampleRateMismatchError(clip.sample_rate, config.sample_rate)
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise FrontendError("cannot compute features of an empty clip")

    pad = config.window // 2
    if x.size > pad:
        padded = np.pad(x, pad, mode="reflect")
    else:
        padded = np.pad(x, pad, mode="constant")

    n_frames = 1 + x.size // config.hop
    idx = np.arange(config.window)[None, :] + config.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * _hann_periodic(config.window)[None, :]

    power = np.abs(np.fft.rfft(frames, n=config.window, axis=1)) ** 2
    fb = mel_filterbank(
        config.sample_rate, config.window, config.n_mels, config.f_min, config.f_max
    )
    mel_power = power @ fb
    return MelSpectrogram(
        frames=np.log(np.maximum(mel_power, LOG_FLOOR)), frame_rate=config.frame_rate
    )
