import json
from pathlib import Path

import numpy as np
import pytest

from cfaudio.audio_io import AudioClip, write_wav
from cfaudio.manifest import load_manifest


def write_manifest_file(path: Path, records: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path


def make_wav(path: Path, seconds: float = 0.5, sample_rate: int = 16000, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    samples = 0.1 * rng.standard_normal(int(seconds * sample_rate))
    write_wav(path, AudioClip(samples=samples, sample_rate=sample_rate))
    return path


@pytest.fixture
def tiny_manifest(tmp_path):
    """Two entries with real audio files; first has two captions."""
    audio_dir = tmp_path / "audio"
    audio_dir.mkdir()
    make_wav(audio_dir / "a.wav", seed=1)
    make_wav(audio_dir / "b.wav", seed=2)
    path = write_manifest_file(
        tmp_path / "manifest.jsonl",
        [
            {
                "id": "clip_a",
                "audio_path": "audio/a.wav",
                "captions": ["a dog barks in the yard", "a dog barks twice"],
            },
            {"id": "clip_b", "audio_path": "audio/b.wav", "captions": ["rain falls softly"]},
        ],
    )
    return load_manifest(path)
