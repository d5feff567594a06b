"""Sinusoidal encodings at real-valued positions and the two audio-visual position plans."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VISION = "vision"
AUDIO = "audio"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class TimestampFactors:
    """Seconds spanned by one frame of each modality."""

    vision_spf: float
    audio_spf: float

    def __post_init__(self):
        for name in ("vision_spf", "audio_spf"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise PlanError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class PositionPlan:
    positions: np.ndarray
    modality: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.positions)

    def of(self, modality: str) -> np.ndarray:
        tags = np.array(self.modality)
        return self.positions[tags == modality]


def sinusoidal_table(positions, d_model: int) -> np.ndarray:
    """Encodings for many positions at once, shape ``[len(positions), d_model]``."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    inv_freq = 1.0 / 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    angles = pos * inv_freq
    out = np.empty((pos.shape[0], d_model), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sinusoidal_pe(pos: float, d_model: int) -> np.ndarray:
    """Encoding of a single (possibly fractional) position."""
    if pos < 0:
        raise ValueError("position must be nonnegative")
    return sinusoidal_table([pos], d_model)[0]


def _plan(vision_pos: np.ndarray, audio_pos: np.ndarray) -> PositionPlan:
    tags = (VISION,) * len(vision_pos) + (AUDIO,) * len(audio_pos)
    return PositionPlan(np.concatenate([vision_pos, audio_pos]).astype(np.float64), tags)


def default_plan(n_v: int, n_a: int = 0) -> PositionPlan:
    """Integer positions restarting at 0 for each modality."""
    return _plan(np.arange(n_v, dtype=np.float64), np.arange(n_a, dtype=np.float64))


def naive_fusion_plan(n_v: int, n_a: int, n_v_max: int) -> PositionPlan:
    """Vision at ``0..n_v-1``, audio offset to start at ``n_v_max``."""
    if n_v < 1:
        raise PlanError("naive fusion needs at least one vision frame")
    if n_v > n_v_max:
        raise PlanError(f"vision length {n_v} exceeds the audio offset {n_v_max}")
    return _plan(
        np.arange(n_v, dtype=np.float64),
        n_v_max + np.arange(n_a, dtype=np.float64),
    )


def fpe_plan(n_v: int, n_a: int, factors: TimestampFactors) -> PositionPlan:
    """Frame index times seconds-per-frame for each modality, vision first."""
    return _plan(
        np.arange(n_v, dtype=np.float64) * factors.vision_spf,
        np.arange(n_a, dtype=np.float64) * factors.audio_spf,
    )


def build_plan(
    mode: str,
    n_v: int,
    n_a: int,
    factors: TimestampFactors | None = None,
    n_v_max: int | None = None,
) -> PositionPlan:
    if mode == "default":
        return default_plan(n_v, n_a)
    if mode == "naive_fusion":
        if n_v_max is None:
            raise PlanError("naive_fusion needs the audio offset n_v_max")
        return naive_fusion_plan(n_v, n_a, n_v_max)
    if mode == "fpe":
        if factors is None:
            raise PlanError("fpe needs timestamp factors")
        return fpe_plan(n_v, n_a, factors)
    raise PlanError(f"unknown pe_mode {mode!r}")
