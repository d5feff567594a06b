import json
import math

import numpy as np
import pytest

from fpevtt.data import (
    AUDIO_DIM,
    DataValidationError,
    FeatureSequence,
    SynthGrid,
    dummy_audio,
    load_dataset,
    load_splits,
    read_features,
    select,
    synth_dataset,
    write_features,
    write_manifest,
)
from fpevtt.positional import AUDIO, VISION


def test_feature_round_trip_is_bit_exact(tmp_path):
    frames = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    write_features(tmp_path / "v.fpef", FeatureSequence(VISION, frames, 3.5))
    back = read_features(tmp_path / "v.fpef")
    assert back.modality == VISION and back.duration_s == 3.5
    assert np.array_equal(back.frames.astype(np.float32), frames)
    assert back.spf == 3.5 / 5


def test_feature_file_errors(tmp_path):
    (tmp_path / "x").write_bytes(b"JUNK" + bytes(30))
    with pytest.raises(DataValidationError, match="magic"):
        read_features(tmp_path / "x")
    write_features(tmp_path / "t.fpef", FeatureSequence(AUDIO, np.ones((2, 3)), 1.0))
    data = (tmp_path / "t.fpef").read_bytes()
    (tmp_path / "t.fpef").write_bytes(data[:-4])
    with pytest.raises(DataValidationError, match="2x3"):
        read_features(tmp_path / "t.fpef")


def test_feature_sequence_validation():
    with pytest.raises(DataValidationError):
        FeatureSequence(VISION, np.zeros((0, 3)), 1.0)
    with pytest.raises(DataValidationError):
        FeatureSequence(VISION, np.ones((2, 3)), 0.0)
    with pytest.raises(DataValidationError):
        FeatureSequence(VISION, np.array([[np.nan]]), 1.0)


def test_dummy_audio_spans_clip():
    a = dummy_audio(9.0)
    assert a.frames.shape == (1, AUDIO_DIM) and not a.frames.any()
    assert a.spf == 9.0


def _write_clip(root, vid, n_v=3, width=8, audio=True, captions=("a b",)):
    (root / "f").mkdir(exist_ok=True)
    write_features(root / f"f/{vid}.v", FeatureSequence(VISION, np.ones((n_v, width)), 2.0))
    entry = {"video_id": vid, "vision_file": f"f/{vid}.v", "duration_s": 2.0, "captions": list(captions)}
    if audio:
        write_features(root / f"f/{vid}.a", FeatureSequence(AUDIO, np.ones((2, AUDIO_DIM)), 2.0))
        entry["audio_file"] = f"f/{vid}.a"
    else:
        entry["audio_file"] = None
    return entry


def test_load_dataset_with_and_without_audio(tmp_path):
    write_manifest(tmp_path / "m.jsonl", [_write_clip(tmp_path, "v1"), _write_clip(tmp_path, "v2", audio=False)])
    recs = load_dataset(tmp_path / "m.jsonl", vision_dim=8)
    assert [r.video_id for r in recs] == ["v1", "v2"]
    assert not recs[0].audio_is_dummy and recs[1].audio_is_dummy
    assert recs[1].audio.n == 1 and recs[1].audio.spf == 2.0


def test_load_dataset_names_the_offending_clip(tmp_path):
    write_manifest(tmp_path / "m.jsonl", [_write_clip(tmp_path, "good"), _write_clip(tmp_path, "narrow", width=7)])
    with pytest.raises(DataValidationError, match=r"narrow.*width 7, expected 8"):
        load_dataset(tmp_path / "m.jsonl", vision_dim=8)


def test_load_dataset_other_errors(tmp_path):
    with pytest.raises(DataValidationError, match="does not exist"):
        load_dataset(tmp_path / "none.jsonl")
    write_manifest(tmp_path / "m.jsonl", [_write_clip(tmp_path, "v", captions=())])
    with pytest.raises(DataValidationError, match="v: no captions"):
        load_dataset(tmp_path / "m.jsonl")
    e = _write_clip(tmp_path, "w")
    write_manifest(tmp_path / "d.jsonl", [e, e])
    with pytest.raises(DataValidationError, match="duplicate"):
        load_dataset(tmp_path / "d.jsonl")
    e = _write_clip(tmp_path, "z")
    e["vision_file"] = "f/missing"
    write_manifest(tmp_path / "x.jsonl", [e])
    with pytest.raises(DataValidationError, match="z: vision file"):
        load_dataset(tmp_path / "x.jsonl")


def test_select_unknown_ids(tmp_path):
    write_manifest(tmp_path / "m.jsonl", [_write_clip(tmp_path, "v1")])
    recs = load_dataset(tmp_path / "m.jsonl")
    with pytest.raises(DataValidationError, match="v9"):
        select(recs, ["v9"])


def test_synth_is_deterministic(tmp_path):
    a = synth_dataset(tmp_path / "a", seed=3, n_clips=20)
    b = synth_dataset(tmp_path / "b", seed=3, n_clips=20)
    assert a == b
    for name in ("manifest.jsonl", "splits.json", "features/clip00007.vision.fpef"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    synth_dataset(tmp_path / "c", seed=4, n_clips=20)
    assert (tmp_path / "a/manifest.jsonl").read_bytes() != (tmp_path / "c/manifest.jsonl").read_bytes()


def test_synth_layout_and_caption_form(tmp_path):
    synth_dataset(tmp_path, seed=0, n_clips=50)
    recs = load_dataset(tmp_path / "manifest.jsonl", vision_dim=SynthGrid().vision_dim)
    splits = load_splits(tmp_path / "splits.json")
    assert len(splits["train"]) == 40 and len(splits["val"]) == 10
    grid = SynthGrid()
    for r in recs:
        words = r.captions[0].split()
        assert len(words) == 4 and words[1] == "comes" and words[2] in ("before", "after")
        assert words[0] in grid.vision_events and words[3] in grid.audio_events
        assert r.vision.duration_s <= r.duration_s + 1e-9 and r.audio.duration_s <= r.duration_s + 1e-9


def test_synth_order_balance_and_index_inversions(tmp_path):
    n = 2000
    stats = synth_dataset(tmp_path, seed=11, n_clips=n)
    # vision-first fraction within 3 sigma of a fair coin
    assert abs(stats["vision_first_fraction"] - 0.5) <= 3 * math.sqrt(0.25 / n)
    assert stats["index_time_inversion_fraction"] >= 0.25
    manifest = [json.loads(x) for x in (tmp_path / "manifest.jsonl").read_text().splitlines()]
    assert len(manifest) == n
