"""Seeding, hashing, and serialization helpers used across modules.

All randomness in the package flows from a single integer seed expanded into
named substreams, so that one seed reproduces every artifact of a run.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from pathlib import Path

import numpy as np


def stream_key(name: str) -> int:
    """Stable 32-bit key for a named random substream."""
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Derive an independent random generator from a base seed and stream names.

    The derivation is a pure function of its arguments: the same
    (seed, names) always yields a generator with the same state, on any
    platform. Integer name components (step counters, epoch indices) are
    used as-is; strings are hashed.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for name in names:
        keys.append(stream_key(name) if isinstance(name, str) else int(name) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


def canonical_json(obj) -> str:
    """Serialize to JSON with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_digest(obj) -> str:
    """Hex digest of a canonicalized configuration object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace; the comparison form for captions."""
    return " ".join(text.lower().split())
