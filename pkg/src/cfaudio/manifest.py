"""Audio-caption dataset manifests.

Wire format: UTF-8, newline-delimited JSON records. Each record is an object
with fields ``id`` (string), ``audio_path`` (string, relative to the manifest
directory), ``captions`` (non-empty array of strings) and an optional
``counterfactuals`` array that, when non-empty, is parallel to ``captions``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DuplicateIdError, ManifestError, ManifestParseError, MissingAudioError
from .util import file_digest, normalize_text

logger = logging.getLogger(__name__)

_RECORD_FIELDS = {"id", "audio_path", "captions", "counterfactuals"}


@dataclass(frozen=True)
class ManifestEntry:
    """One audio clip with its captions and optional counterfactual captions."""

    id: str
    audio_path: str
    captions: tuple[str, ...]
    counterfactuals: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.captions:
            raise ManifestError(f"entry {self.id!r}: captions must be non-empty")
        if self.counterfactuals and len(self.counterfactuals) != len(self.captions):
            raise ManifestError(
                f"entry {self.id!r}: counterfactuals length "
                f"{len(self.counterfactuals)} != captions length {len(self.captions)}"
            )

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "audio_path": self.audio_path,
            "captions": list(self.captions),
        }
        if self.counterfactuals:
            record["counterfactuals"] = list(self.counterfactuals)
        return record


@dataclass(frozen=True)
class DatasetManifest:
    """A validated collection of manifest entries.

    ``root`` is the directory audio paths are resolved against. Manifests are
    immutable after load and safe to share between threads.
    """

    entries: tuple[ManifestEntry, ...]
    dataset_name: str = "unnamed"
    version: str = ""
    root: Path = field(default_factory=Path)

    def resolve_audio(self, entry: ManifestEntry) -> Path:
        return self.root / entry.audio_path

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class CaptionPair:
    """One (audio, caption) training pair, optionally with a counterfactual.

    ``source_spans`` holds (start, end, label) character spans of identified
    acoustic sources within the caption, when known.
    """

    entry_id: str
    audio_path: str
    caption: str
    counterfactual: str | None = None
    source_spans: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        if not self.caption.strip():
            raise ManifestError(f"pair for entry {self.entry_id!r}: caption is empty")
        if self.counterfactual is not None and normalize_text(
            self.counterfactual
        ) == normalize_text(self.caption):
            raise ManifestError(
                f"pair for entry {self.entry_id!r}: counterfactual equals caption"
            )


def _parse_record(line_no: int, line: str) -> ManifestEntry:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(line_no, f"invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ManifestParseError(line_no, "record is not an object")
    unknown = set(obj) - _RECORD_FIELDS
    if unknown:
        raise ManifestParseError(line_no, f"unknown field(s): {', '.join(sorted(unknown))}")
    for key in ("id", "audio_path", "captions"):
        if key not in obj:
            raise ManifestParseError(line_no, f"missing field {key!r}")
    if not isinstance(obj["captions"], list) or not all(
        isinstance(c, str) for c in obj["captions"]
    ):
        raise ManifestParseError(line_no, "captions must be an array of strings")
    counterfactuals = obj.get("counterfactuals", [])
    if not isinstance(counterfactuals, list) or not all(
        isinstance(c, str) for c in counterfactuals
    ):
        raise ManifestParseError(line_no, "counterfactuals must be an array of strings")
    try:
        return ManifestEntry(
            id=str(obj["id"]),
            audio_path=str(obj["audio_path"]),
            captions=tuple(obj["captions"]),
            counterfactuals=tuple(counterfactuals),
        )
    except ManifestError as exc:
        raise ManifestParseError(line_no, str(exc)) from exc


def load_manifest(path: str | Path, check_audio: bool = True) -> DatasetManifest:
    """Load and validate a manifest file.

    Args:
        path: manifest file in the newline-delimited record format.
        check_audio: verify that every audio path resolves to a readable
            file; all missing paths are reported at once.

    Raises:
        ManifestParseError: a record is malformed (reports its line number).
        DuplicateIdError: entry ids are not unique.
        MissingAudioError: some audio files are absent (lists all of them).
    """
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            entries.append(_parse_record(line_no, line))

    seen: set[str] = set()
    duplicates: list[str] = []
    for entry in entries:
        if entry.id in seen and entry.id not in duplicates:
            duplicates.append(entry.id)
        seen.add(entry.id)
    if duplicates:
        raise DuplicateIdError(duplicates)

    if check_audio:
        missing = [e.audio_path for e in entries if not (root / e.audio_path).is_file()]
        if missing:
            raise MissingAudioError(missing)

    return DatasetManifest(
        entries=tuple(entries),
        dataset_name=path.stem,
        version=file_digest(path)[:12],
        root=root,
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest in the wire format, one record per line.

    Audio paths are rewritten relative to the target file's directory, so a
    manifest saved anywhere keeps resolving to the same audio files.
    """
    target_dir = Path(path).parent
    with open(path, "w", encoding="utf-8") as f:
        for entry in manifest.entries:
            record = entry.to_record()
            record["audio_path"] = os.path.relpath(manifest.resolve_audio(entry), target_dir)
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def expand_pairs(manifest: DatasetManifest) -> list[CaptionPair]:
    """Expand multi-caption entries into independent (audio, caption) pairs.

    Output order is deterministic: entry order, then caption index. The
    expansion is a bijection onto (entry, caption-index): clips with five
    captions contribute five pairs.
    """
    pairs: list[CaptionPair] = []
    for entry in manifest.entries:
        for i, caption in enumerate(entry.captions):
            counterfactual = entry.counterfactuals[i] if entry.counterfactuals else None
            pairs.append(
                CaptionPair(
                    entry_id=entry.id,
                    audio_path=str(manifest.resolve_audio(entry)),
                    caption=caption,
                    counterfactual=counterfactual,
                )
            )
    return pairs
