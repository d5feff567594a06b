"""Feature files, clip manifests, split files and the synthetic alignment dataset."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .positional import AUDIO, VISION

FEATURE_MAGIC = b"FPEF"
AUDIO_DIM = 128
_MODALITY_BYTE = {VISION: 0, AUDIO: 1}
_BYTE_MODALITY = {v: k for k, v in _MODALITY_BYTE.items()}


class DataValidationError(ValueError):
    pass


@dataclass
class FeatureSequence:
    """Frames of one modality plus the clip time they cover."""

    modality: str
    frames: np.ndarray
    duration_s: float
    timestamp_factor: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.modality not in _MODALITY_BYTE:
            raise DataValidationError(f"unknown modality {self.modality!r}")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataValidationError(f"{self.modality} frames must be a nonempty matrix")
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise DataValidationError(f"duration must be positive, got {self.duration_s}")
        if not np.all(np.isfinite(self.frames)):
            raise DataValidationError(f"{self.modality} frames contain non-finite values")

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def spf(self) -> float:
        """Seconds per frame; falls back to duration / frame count."""
        if self.timestamp_factor is not None:
            return self.timestamp_factor
        return self.duration_s / self.n


def dummy_audio(duration_s: float) -> FeatureSequence:
    """Single all-zero audio frame standing in for a missing audio track."""
    return FeatureSequence(AUDIO, np.zeros((1, AUDIO_DIM)), duration_s, timestamp_factor=duration_s)


@dataclass
class ClipRecord:
    video_id: str
    vision: FeatureSequence
    audio: FeatureSequence
    captions: list[str] = field(default_factory=list)
    duration_s: float = 0.0
    audio_is_dummy: bool = False


# ---------------------------------------------------------------------------
# binary feature files


def write_features(path, seq: FeatureSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<B", _MODALITY_BYTE[seq.modality]))
        f.write(struct.pack("<II", *frames.shape))
        f.write(struct.pack("<d", seq.duration_s))
        f.write(frames.tobytes())


def read_features(path) -> FeatureSequence:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise DataValidationError(f"{path}: not a feature file (bad magic)")
    if len(data) < 21:
        raise DataValidationError(f"{path}: truncated header")
    (mod,) = struct.unpack_from("<B", data, 4)
    n, d = struct.unpack_from("<II", data, 5)
    (duration,) = struct.unpack_from("<d", data, 13)
    body = data[21:]
    if mod not in _BYTE_MODALITY:
        raise DataValidationError(f"{path}: unknown modality byte {mod}")
    if len(body) != n * d * 4:
        raise DataValidationError(f"{path}: header says {n}x{d} but body holds {len(body) // 4} values")
    frames = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)
    try:
        return FeatureSequence(_BYTE_MODALITY[mod], frames, duration)
    except DataValidationError as e:
        raise DataValidationError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# manifests and splits


def load_dataset(manifest_path, vision_dim: int | None = None) -> list[ClipRecord]:
    """Read a JSON-lines manifest; feature paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataValidationError(f"manifest {manifest_path} does not exist")
    root = manifest_path.parent
    records = []
    seen = set()
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            vid = str(entry["video_id"])
        except (json.JSONDecodeError, KeyError) as e:
            raise DataValidationError(f"{manifest_path}:{lineno}: bad manifest entry ({e})") from None
        if vid in seen:
            raise DataValidationError(f"{vid}: duplicate video_id")
        seen.add(vid)
        records.append(_load_record(root, entry, vid, vision_dim))
    return records


def _load_record(root: Path, entry: dict, vid: str, vision_dim: int | None) -> ClipRecord:
    captions = entry.get("captions") or []
    if not captions:
        raise DataValidationError(f"{vid}: no captions")
    duration = float(entry.get("duration_s", 0.0))
    if not (math.isfinite(duration) and duration > 0):
        raise DataValidationError(f"{vid}: duration_s must be positive")

    vpath = root / entry["vision_file"]
    if not vpath.exists():
        raise DataValidationError(f"{vid}: vision file {vpath} missing")
    try:
        vision = read_features(vpath)
    except DataValidationError as e:
        raise DataValidationError(f"{vid}: {e}") from None
    if vision.modality != VISION:
        raise DataValidationError(f"{vid}: {vpath} is not a vision feature file")
    if vision_dim is not None and vision.dim != vision_dim:
        raise DataValidationError(
            f"{vid}: vision file {vpath} has width {vision.dim}, expected {vision_dim}"
        )

    afile = entry.get("audio_file")
    if afile is None:
        audio, is_dummy = dummy_audio(duration), True
    else:
        apath = root / afile
        if not apath.exists():
            raise DataValidationError(f"{vid}: audio file {apath} missing")
        try:
            audio = read_features(apath)
        except DataValidationError as e:
            raise DataValidationError(f"{vid}: {e}") from None
        if audio.modality != AUDIO or audio.dim != AUDIO_DIM:
            raise DataValidationError(
                f"{vid}: audio file {apath} must hold {AUDIO_DIM}-wide audio frames, got {audio.dim}"
            )
        is_dummy = False
    return ClipRecord(vid, vision, audio, [str(c) for c in captions], duration, is_dummy)


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def load_splits(path) -> dict[str, list[str]]:
    splits = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("train", "val", "test"):
        splits.setdefault(key, [])
    return splits


def select(records: list[ClipRecord], ids) -> list[ClipRecord]:
    by_id = {r.video_id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataValidationError(f"split references unknown video ids: {missing[:5]}")
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------------------
# synthetic audio-visual alignment data


@dataclass(frozen=True)
class SynthGrid:
    vision_events: tuple[str, ...] = ("jump", "wave", "fall")
    audio_events: tuple[str, ...] = ("bang", "ring", "clap")
    duration_range: tuple[float, float] = (6.0, 12.0)
    vision_frames_range: tuple[int, int] = (8, 32)
    audio_frames_range: tuple[int, int] = (4, 12)
    # fraction of the clip each stream's frames span
    coverage_range: tuple[float, float] = (0.2, 1.0)
    vision_dim: int = 16
    noise: float = 0.3
    min_gap_s: float = 1.0
    val_fraction: float = 0.2


ORDER_WORDS = ("before", "after")


def _event_patterns(grid: SynthGrid) -> tuple[np.ndarray, np.ndarray]:
    # fixed, seed-independent codes so every generated dataset shares one event vocabulary
    code_rng = np.random.default_rng(20240613)
    vis = code_rng.normal(size=(len(grid.vision_events), grid.vision_dim))
    aud = code_rng.normal(size=(len(grid.audio_events), AUDIO_DIM))
    vis *= 2.0 / np.linalg.norm(vis, axis=1, keepdims=True) * math.sqrt(grid.vision_dim)
    aud *= 2.0 / np.linalg.norm(aud, axis=1, keepdims=True) * math.sqrt(AUDIO_DIM)
    return vis, aud


def synth_clip(rng: np.random.Generator, grid: SynthGrid, patterns) -> dict:
    """One clip: a vision event frame and an audio event frame at random times.

    Frame counts, event frame indices and clip length are drawn without
    looking at the event order. Only the hidden per-stream coverage (and so
    the seconds per frame) decides which event comes first, so integer frame
    positions carry no information about the order while timestamps settle it.
    The caption is ``"<vision event> comes before|after <audio event>"``.
    """
    vis_pat, aud_pat = patterns
    lo, hi = grid.coverage_range
    gap = grid.min_gap_s
    want_vision_first = bool(rng.random() < 0.5)
    for _ in range(10_000):
        duration = float(rng.uniform(*grid.duration_range))
        n_v = int(rng.integers(grid.vision_frames_range[0], grid.vision_frames_range[1] + 1))
        n_a = int(rng.integers(grid.audio_frames_range[0], grid.audio_frames_range[1] + 1))
        i_v = int(rng.integers(1, n_v))
        j_a = int(rng.integers(1, n_a))
        # event time = index * coverage * duration / count, coverage in [lo, hi]
        sv, sa = i_v * duration / n_v, j_a * duration / n_a
        # keep the draw only if either order is comfortably reachable
        if sv * lo + 2 * gap <= sa * hi and sa * lo + 2 * gap <= sv * hi:
            break
    else:
        raise ValueError("synthesis grid cannot place two events min_gap_s apart in both orders")
    for _ in range(100_000):
        cv, ca = rng.uniform(lo, hi, size=2)
        t_v, t_a = sv * cv, sa * ca
        if abs(t_v - t_a) >= gap and (t_v < t_a) == want_vision_first:
            break
    else:  # pragma: no cover - the reachability check above makes this vanishingly unlikely
        raise ValueError("could not realise the requested event order")
    v_cover, a_cover = float(cv * duration), float(ca * duration)

    ve = int(rng.integers(len(grid.vision_events)))
    ae = int(rng.integers(len(grid.audio_events)))

    vision = rng.normal(scale=grid.noise, size=(n_v, grid.vision_dim))
    vision[i_v] += vis_pat[ve]
    audio = rng.normal(scale=grid.noise, size=(n_a, AUDIO_DIM))
    audio[j_a] += aud_pat[ae]
    order = ORDER_WORDS[0] if t_v < t_a else ORDER_WORDS[1]
    caption = f"{grid.vision_events[ve]} comes {order} {grid.audio_events[ae]}"
    return {
        "duration_s": duration,
        "vision_duration_s": v_cover,
        "audio_duration_s": a_cover,
        "vision": vision.astype(np.float32),
        "audio": audio.astype(np.float32),
        "caption": caption,
        "vision_first": t_v < t_a,
        "index_first": i_v < j_a,
    }


def synth_dataset(out_dir, seed: int, n_clips: int, grid: SynthGrid | None = None) -> dict:
    """Write features, ``manifest.jsonl`` and ``splits.json``; return summary stats."""
    grid = grid or SynthGrid()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    patterns = _event_patterns(grid)
    entries = []
    vision_first = inverted = 0
    for k in range(n_clips):
        clip = synth_clip(rng, grid, patterns)
        vid = f"clip{k:05d}"
        vfile = f"features/{vid}.vision.fpef"
        afile = f"features/{vid}.audio.fpef"
        write_features(out / vfile, FeatureSequence(VISION, clip["vision"], clip["vision_duration_s"]))
        write_features(out / afile, FeatureSequence(AUDIO, clip["audio"], clip["audio_duration_s"]))
        entries.append({
            "video_id": vid,
            "vision_file": vfile,
            "audio_file": afile,
            "duration_s": clip["duration_s"],
            "captions": [clip["caption"]],
        })
        vision_first += clip["vision_first"]
        inverted += clip["vision_first"] != clip["index_first"]
    write_manifest(out / "manifest.jsonl", entries)
    n_val = int(round(n_clips * grid.val_fraction))
    ids = [e["video_id"] for e in entries]
    splits = {"train": ids[: n_clips - n_val], "val": ids[n_clips - n_val:], "test": []}
    (out / "splits.json").write_text(json.dumps(splits, indent=1), encoding="utf-8")
    return {
        "n_clips": n_clips,
        "vision_first_fraction": float(vision_first) / max(n_clips, 1),
        "index_time_inversion_fraction": float(inverted) / max(n_clips, 1),
    }
