import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budget_cases import random_case, samples_per_block
from oausim.acquisition import (
    MIB,
    REFERENCE_TAU_S,
    REFERENCE_TAU_S_DECIMAL,
    CapacityError,
    LeakyBucketModel,
    budget_table,
    max_fps,
    max_frame_bits,
    max_frame_length,
    oracle_max_frame_length,
    simulate_occupancy,
    write_budget_csv,
)

BLOCK = 256 * 1024


def reference(tau=REFERENCE_TAU_S, buffer_bytes=4 * MIB):
    return LeakyBucketModel.from_acquisition(256, 16, 80e6, buffer_bytes, 95.6e9, tau)


def test_reference_rates():
    m = reference()
    assert m.r_in == pytest.approx(327.68e9)
    assert m.buffer_bits == 4 * MIB * 8


def test_reference_frame_length():
    # 256 ch x 16 bit at 80 MSPS into a 4 MiB buffer read at 95.6 Gb/s
    assert max_frame_length(reference()) == 5639


def test_reference_frame_rates():
    m = reference()
    assert max_fps(m, 5639) == pytest.approx(4.14e3, rel=5e-3)
    assert max_fps(m, 2000) == pytest.approx(11.7e3, rel=5e-3)


def test_closed_form_hand_value():
    # r_in (B - r_out tau) / (r_in - r_out) / 4096, evaluated by hand
    bits = 327.68e9 * (33554432 - 95.6e9 * 179.856e-6) / (327.68e9 - 95.6e9)
    assert float(max_frame_bits(reference())) == pytest.approx(bits, rel=1e-12)
    assert math.floor(bits / 4096) == 5639


@pytest.mark.parametrize("tau_us", [179.842, 179.856, 179.870])
def test_reference_tau_interval(tau_us):
    assert max_frame_length(reference(tau_us * 1e-6)) == 5639


def test_decimal_megabyte_reading():
    assert max_frame_length(reference(REFERENCE_TAU_S_DECIMAL, 4_000_000)) == 5639


def test_rounded_tau_is_one_sample_short():
    assert max_frame_length(reference(179.9e-6)) == 5638


def test_zero_latency():
    assert max_frame_length(reference(0.0)) == 11566


def test_unbounded_when_readout_keeps_up():
    m = LeakyBucketModel(10e9, 10e9, 1e6, 1e-5, 16, 16)
    assert max_frame_length(m) == math.inf
    assert max_fps(m, 10**6) == pytest.approx(10e9 / (10**6 * 256))
    # occupancy plateaus at r_in * tau however long the frame is
    res = simulate_occupancy(m, 10**6, block_size=4096)
    assert not res.overflow
    assert res.peak_bits == pytest.approx(10e9 * 1e-5, rel=0.05)


def test_no_readout_bounds_by_buffer():
    m = LeakyBucketModel(10e9, 0.0, 256 * 1000, 0.0, 16, 16)
    assert max_frame_length(m) == 1000


def test_latency_exhausts_buffer(caplog):
    m = LeakyBucketModel(10e9, 5e9, 1e5, 1.0, 16, 16)
    with caplog.at_level("WARNING"):
        assert max_frame_length(m) == 0
    assert "exhausted" in caplog.text


def test_capacity_error_beyond_limit():
    with pytest.raises(CapacityError):
        max_fps(reference(), 5640)
    with pytest.raises(ValueError):
        max_fps(reference(), 0)


def test_invalid_model():
    with pytest.raises(ValueError):
        LeakyBucketModel(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        LeakyBucketModel(1.0, 1.0, 1.0, -1.0)


def test_simulation_brackets_reference():
    m = reference()
    step = samples_per_block(m, BLOCK)
    assert not simulate_occupancy(m, 5639, BLOCK).overflow
    assert simulate_occupancy(m, 5639 + 2 * step, BLOCK).overflow


def test_more_frames_do_not_change_verdict():
    m = reference()
    for n in (3, 10, 30):
        assert not simulate_occupancy(m, 5639, BLOCK, n_frames=n).overflow
        assert simulate_occupancy(m, 5639 + 200, BLOCK, n_frames=n).overflow


def test_single_frame_peak_below_streaming_peak():
    m = reference()
    one = simulate_occupancy(m, 5639, BLOCK, n_frames=1)
    many = simulate_occupancy(m, 5639, BLOCK, n_frames=5)
    assert one.peak_bits < many.peak_bits <= m.buffer_bits


def test_occupancy_monotone_in_frame_length():
    m = reference()
    peaks = [simulate_occupancy(m, n, BLOCK).peak_bits for n in range(1000, 8000, 500)]
    assert all(a <= b for a, b in zip(peaks, peaks[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_oracle_agrees_within_one_block(seed):
    model, block = random_case(np.random.default_rng(seed))
    closed = max_frame_length(model)
    found = oracle_max_frame_length(model, block)
    assert abs(found - closed) <= samples_per_block(model, block)


def test_budget_table_and_csv(tmp_path):
    rows = budget_table(channels=(16, 256), fs=(80e6,), frame_len=(2000,))
    assert rows[0]["L_f_max"] == 5639 and rows[1]["frame_len"] == 2000
    by_ch = {r["channels"]: r for r in rows[2:]}
    assert by_ch[16]["status"] == "unbounded"
    assert by_ch[256]["status"] == "ok"
    rows += budget_table(channels=(256,), frame_len=(6000,))[2:]
    assert rows[-1]["status"] == "exceeds"
    path = tmp_path / "b.csv"
    write_budget_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("channels,bits,fs,B,R_out,tau_s,L_f_max")
    assert len(lines) == len(rows) + 1
