import pytest

from cfaudio.errors import DuplicateIdError, ManifestError, ManifestParseError, MissingAudioError
from cfaudio.manifest import (
    CaptionPair,
    ManifestEntry,
    expand_pairs,
    load_manifest,
    save_manifest,
)

from conftest import make_wav, write_manifest_file


def test_load_two_entries_five_captions_each(tmp_path):
    audio = tmp_path / "audio"
    audio.mkdir()
    records = []
    for i in range(2):
        make_wav(audio / f"{i}.wav", seed=i)
        records.append(
            {
                "id": f"clip_{i}",
                "audio_path": f"audio/{i}.wav",
                "captions": [f"caption {j} of clip {i}" for j in range(5)],
            }
        )
    manifest = load_manifest(write_manifest_file(tmp_path / "m.jsonl", records))
    assert len(manifest.entries) == 2
    assert all(len(e.captions) == 5 for e in manifest.entries)


def test_duplicate_id_reported_by_name(tmp_path):
    make_wav(tmp_path / "x.wav")
    records = [
        {"id": "clip_7", "audio_path": "x.wav", "captions": ["one"]},
        {"id": "clip_7", "audio_path": "x.wav", "captions": ["two"]},
    ]
    with pytest.raises(DuplicateIdError) as excinfo:
        load_manifest(write_manifest_file(tmp_path / "m.jsonl", records))
    assert "clip_7" in str(excinfo.value)


def test_missing_audio_lists_all_paths(tmp_path):
    records = [
        {"id": "a", "audio_path": "gone1.wav", "captions": ["x"]},
        {"id": "b", "audio_path": "gone2.wav", "captions": ["y"]},
    ]
    with pytest.raises(MissingAudioError) as excinfo:
        load_manifest(write_manifest_file(tmp_path / "m.jsonl", records))
    assert excinfo.value.missing == ["gone1.wav", "gone2.wav"]


def test_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "a", "audio_path": "x.wav", "captions": ["c"]}\nnot json\n')
    with pytest.raises(ManifestParseError) as excinfo:
        load_manifest(path)
    assert excinfo.value.line_no == 2


def test_unknown_field_rejected(tmp_path):
    path = write_manifest_file(
        tmp_path / "m.jsonl",
        [{"id": "a", "audio_path": "x.wav", "captions": ["c"], "extra": 1}],
    )
    with pytest.raises(ManifestParseError) as excinfo:
        load_manifest(path)
    assert "extra" in str(excinfo.value)


def test_counterfactuals_must_parallel_captions():
    with pytest.raises(ManifestError):
        ManifestEntry(
            id="a", audio_path="x.wav", captions=("one", "two"), counterfactuals=("only",)
        )


def test_five_caption_clip_expands_to_five_pairs(tmp_path):
    audio = tmp_path / "clip.wav"
    make_wav(audio)
    records = [
        {
            "id": "clip",
            "audio_path": "clip.wav",
            "captions": [f"caption {j}" for j in range(5)],
        }
    ]
    manifest = load_manifest(write_manifest_file(tmp_path / "m.jsonl", records))
    pairs = expand_pairs(manifest)
    assert len(pairs) == 5
    assert len({p.audio_path for p in pairs}) == 1


def test_expand_single_caption_no_counterfactual(tiny_manifest):
    pairs = expand_pairs(tiny_manifest)
    assert pairs[2].caption == "rain falls softly"
    assert pairs[2].counterfactual is None


def test_expand_order_is_entry_major(tmp_path):
    # 3 entries x {1, 2, 3} captions -> 6 pairs, enumerated by hand
    audio = tmp_path / "x.wav"
    make_wav(audio)
    records = [
        {"id": "e0", "audio_path": "x.wav", "captions": ["c00"]},
        {"id": "e1", "audio_path": "x.wav", "captions": ["c10", "c11"]},
        {"id": "e2", "audio_path": "x.wav", "captions": ["c20", "c21", "c22"]},
    ]
    manifest = load_manifest(write_manifest_file(tmp_path / "m.jsonl", records))
    pairs = expand_pairs(manifest)
    assert [(p.entry_id, p.caption) for p in pairs] == [
        ("e0", "c00"),
        ("e1", "c10"),
        ("e1", "c11"),
        ("e2", "c20"),
        ("e2", "c21"),
        ("e2", "c22"),
    ]


def test_expand_is_bijective_onto_caption_slots(tiny_manifest):
    pairs = expand_pairs(tiny_manifest)
    slots = [(p.entry_id, p.caption) for p in pairs]
    expected = [
        (e.id, c) for e in tiny_manifest.entries for c in e.captions
    ]
    assert slots == expected
    assert len(set(slots)) == len(slots)


def test_roundtrip_preserves_semantics(tiny_manifest, tmp_path):
    out = tmp_path / "copy.jsonl"
    save_manifest(tiny_manifest, out)
    # audio paths are relative to the original manifest directory
    reloaded = load_manifest(out, check_audio=False)
    assert [e.to_record() for e in reloaded.entries] == [
        e.to_record() for e in tiny_manifest.entries
    ]


def test_caption_pair_rejects_identity_counterfactual():
    with pytest.raises(ManifestError):
        CaptionPair(
            entry_id="e",
            audio_path="x.wav",
            caption="A dog barks",
            counterfactual="a dog  barks",
        )


def test_caption_pair_rejects_blank_caption():
    with pytest.raises(ManifestError):
        CaptionPair(entry_id="e", audio_path="x.wav", caption="   ")
