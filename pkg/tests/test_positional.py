import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpevtt.positional import (
    AUDIO,
    VISION,
    PlanError,
    TimestampFactors,
    default_plan,
    fpe_plan,
    naive_fusion_plan,
    sinusoidal_pe,
    sinusoidal_table,
)


def test_pe_at_zero_alternates():
    assert np.array_equal(sinusoidal_pe(0.0, 8), np.array([0, 1, 0, 1, 0, 1, 0, 1.0]))


def test_pe_half_position_direct_evaluation():
    expected = [math.sin(0.5), math.cos(0.5), math.sin(0.005), math.cos(0.005)]
    assert np.allclose(sinusoidal_pe(0.5, 4), expected, rtol=0, atol=1e-15)


def test_fractional_pe_generalises_integer_pe():
    table = sinusoidal_table(np.arange(5), 16)
    assert np.array_equal(sinusoidal_pe(1.0, 16), table[1])


def test_pe_needs_even_width():
    with pytest.raises(ValueError):
        sinusoidal_pe(1.0, 5)


def test_pe_is_continuous():
    for p in (0.0, 0.3, 7.25, 123.0):
        assert np.max(np.abs(sinusoidal_pe(p, 32) - sinusoidal_pe(p + 1e-6, 32))) < 2e-6


def test_naive_fusion_index_formula():
    assert naive_fusion_plan(3, 2, 40).positions.tolist() == [0, 1, 2, 40, 41]
    assert naive_fusion_plan(3, 0, 40).positions.tolist() == [0, 1, 2]
    assert naive_fusion_plan(1, 1, 40).positions.tolist() == [0, 40]


def test_naive_fusion_rejects_long_vision():
    with pytest.raises(PlanError):
        naive_fusion_plan(41, 2, 40)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 30), st.integers(0, 20))
def test_naive_fusion_never_collides(n_v, n_a, extra):
    plan = naive_fusion_plan(n_v, n_a, n_v + extra)
    assert not set(plan.of(VISION)) & set(plan.of(AUDIO))
    assert np.all(np.diff(plan.of(VISION)) > 0)


def test_fpe_plan_interleaves_by_time():
    duration = 10.0
    f = TimestampFactors(duration / 32, duration / 11)
    plan = fpe_plan(32, 11, f)
    vision, audio = plan.of(VISION), plan.of(AUDIO)
    assert f.vision_spf == 0.3125
    assert f.audio_spf == pytest.approx(0.9090909090909091, abs=1e-15)
    assert vision[16] == 5.0
    assert audio[5] == pytest.approx(4.545454545454545, abs=1e-12)
    assert audio[6] == pytest.approx(5.454545454545454, abs=1e-12)
    assert audio[5] < vision[16] < audio[6]
    assert plan.modality[:32] == (VISION,) * 32 and plan.modality[32:] == (AUDIO,) * 11


def test_fpe_unit_factors_equal_default_plan_bitwise():
    a = fpe_plan(7, 5, TimestampFactors(1.0, 1.0))
    b = default_plan(7, 5)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(
        sinusoidal_table(a.positions, 16), sinusoidal_table(b.positions, 16)
    )


def test_fpe_pure_audio():
    plan = fpe_plan(0, 3, TimestampFactors(0.5, 0.96))
    assert plan.positions.tolist() == [0.0, 0.96, 1.92]


@pytest.mark.parametrize("bad", [0.0, -1.0, float("inf"), float("nan")])
def test_timestamp_factors_must_be_positive(bad):
    with pytest.raises(PlanError):
        TimestampFactors(bad, 1.0)


def test_coinciding_timestamps_get_close_encodings():
    # vision frame at 2.0 s against audio frames approaching 2.0 s
    target = sinusoidal_pe(2.0, 32)
    gaps = [np.linalg.norm(sinusoidal_pe(2.0 + dt, 32) - target) for dt in (0.5, 0.1, 0.01, 0.0)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.floats(0.01, 5), st.floats(0.01, 5))
def test_fpe_positions_strictly_increasing_per_modality(n_v, n_a, v, a):
    plan = fpe_plan(n_v, n_a, TimestampFactors(v, a))
    assert np.all(np.diff(plan.of(VISION)) > 0)
    assert np.all(np.diff(plan.of(AUDIO)) > 0)
    assert np.array_equal(plan.of(VISION), np.arange(n_v) * v)
