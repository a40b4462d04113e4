import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oausim.analysis import (
    AnalysisError,
    SweepRecord,
    bandpass,
    bandpass_response,
    bandpass_taps,
    corners_3db,
    default_sweep_grid,
    envelope,
    gain_curve,
    peak_to_peak,
    read_pgm,
    render_image,
    snr_estimate,
    write_gain_csv,
    write_image_csv,
    write_pgm,
    write_snr_csv,
)
from oausim.samples import SampleBlock

FS = 125e6
N = 32768


def tone(f, amp, fs=FS, n=N, phase=0.5, noise=0.0, seed=0):
    t = np.arange(n)
    x = amp * np.cos(2 * np.pi * np.mod(t * f / fs, 1.0) + phase)
    if noise:
        x = x + np.random.default_rng(seed).normal(0.0, noise, n)
    return SweepRecord(f, x, fs)


def record_at_snr(snr_db, f0, amp=16000.0, seed=0):
    """Sine plus white noise with power ratio ``snr_db``."""
    sigma = amp / math.sqrt(2) / 10 ** (snr_db / 20)
    return tone(f0, amp, noise=sigma, seed=seed)


def phase_count(f, fs=FS):
    # distinct sample phases of a tone at f: fs / gcd(f, fs) in 1 Hz units
    return int(round(fs)) // math.gcd(int(round(f)), int(round(fs)))


# ------------------------------------------------------------ gain, corners


def test_peak_to_peak():
    assert peak_to_peak([3, -2, 7, 0]) == 9


def test_half_amplitude_is_minus_six_db():
    res = gain_curve([tone(5.1e6, 1000.0), tone(7.3e6, 500.0)])
    assert res.g_db[0] == 0.0
    assert res.g_db[1] == pytest.approx(-6.0206, abs=1e-3)
    assert res.f_peak == 5.1e6


def test_first_order_pole():
    fc = 10e6
    grid = default_sweep_grid()
    # tones with few distinct sample phases under-read max-min; leave them out
    grid = grid[[phase_count(f) >= 100 for f in grid]]
    h = 1 / np.sqrt(1 + (grid / fc) ** 2)
    res = gain_curve([tone(f, 20000.0 * g) for f, g in zip(grid, h)])
    expect = -10 * np.log10(1 + (grid / fc) ** 2) + 10 * np.log10(1 + (grid[0] / fc) ** 2)
    assert np.max(np.abs(res.g_db - expect)) < 0.1
    lo, hi = corners_3db(res)
    assert lo is None
    assert hi == pytest.approx(fc, abs=0.2e6)


def test_bandpass_response_corners():
    f = np.array([1e6, 46e6, math.sqrt(46e12)])
    h = bandpass_response(f, 1e6, 46e6)
    assert h[:2] == pytest.approx([1 / math.sqrt(2)] * 2, rel=1e-12)
    assert h[2] == pytest.approx(1.0)


def test_corner_interpolation_midpoint():
    f = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    g = np.array([-4.0, -2.0, 0.0, -2.0, -4.0])
    from oausim.analysis import BandwidthResult

    lo, hi = corners_3db(BandwidthResult(f, 10 ** (g / 20), g, 3.0))
    assert lo == pytest.approx(1.5) and hi == pytest.approx(4.5)


def test_rising_curve_has_no_upper_corner():
    recs = [tone(f, 100.0 * (1 + i)) for i, f in enumerate([3.1e6, 5.3e6, 7.7e6, 9.1e6])]
    lo, hi = corners_3db(gain_curve(recs))
    assert hi is None and lo is not None


def test_synthetic_bandpass_corners_on_grid():
    grid = default_sweep_grid()
    h = bandpass_response(grid, 1e6, 46e6)
    res = gain_curve([tone(f, 16000.0 * g) for f, g in zip(grid, h)])
    lo, hi = corners_3db(res)
    assert abs(lo - 1e6) <= 0.2e6 and abs(hi - 46e6) <= 0.2e6


def test_default_grid():
    g = default_sweep_grid()
    assert g[0] == pytest.approx(0.2e6) and g[-1] == pytest.approx(62.49e6)
    assert np.allclose(np.diff(g[:-1]), 0.2e6)
    assert g.size == 313


def test_gain_curve_errors():
    with pytest.raises(AnalysisError):
        gain_curve([tone(1e6, 1.0)])
    with pytest.raises(AnalysisError, match="no excursion"):
        gain_curve([tone(1e6, 1.0), SweepRecord(2e6, np.zeros(10), FS)])
    with pytest.raises(AnalysisError):
        SweepRecord(1e6, np.zeros((2, 2)), FS)


# --------------------------------------------------------------------- SNR


@pytest.mark.parametrize("snr", [20, 40, 56, 70])
@pytest.mark.parametrize("f0", [5.1e6, 12.3e6, 30.7e6])
def test_snr_recovered(snr, f0):
    res = snr_estimate(record_at_snr(snr, f0, seed=int(f0) + snr))
    assert res.snr_db == pytest.approx(snr, abs=0.5)


def test_snr_quantised_record():
    rec = record_at_snr(56, 10.3e6, seed=1)
    q = SweepRecord(rec.tone_frequency, np.rint(rec.samples).astype(np.int16), FS)
    assert snr_estimate(q).snr_db == pytest.approx(56, abs=0.5)


def test_snr_noiseless_record_is_near_float_floor():
    # a tone on an exact bin leaves only window sidelobes and rounding
    f0 = 1024 * FS / N
    assert snr_estimate(tone(f0, 1000.0, phase=0.0)).snr_db > 110


def test_harmonics_are_masked():
    f0 = 7.3e6
    rec = record_at_snr(60, f0, seed=3)
    x = rec.samples + 200.0 * np.cos(2 * np.pi * 2 * f0 * np.arange(N) / FS)
    with_h2 = snr_estimate(SweepRecord(f0, x, FS))
    assert with_h2.snr_db == pytest.approx(60, abs=0.5)
    unmasked = snr_estimate(SweepRecord(f0, x, FS), harmonic_guards=0)
    assert unmasked.snr_db < 55


def test_noise_bins_disjoint_from_signal_and_dc():
    res = snr_estimate(record_at_snr(40, 20.1e6))
    lo, hi = res.f0_bin - res.span, res.f0_bin + res.span
    nb = res.noise_bins
    assert not ((nb >= lo) & (nb <= hi)).any()
    dc = next(m for m in res.mask if m[0] == "dc")
    assert nb.min() > dc[2]
    assert (nb * FS / N >= 1e6).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30))
def test_wider_guards_never_add_noise(a, b):
    rec = record_at_snr(50, 9.7e6, seed=7)
    lo, hi = sorted((a, b))
    assert snr_estimate(rec, guard_bins=hi).p_noise <= snr_estimate(rec, guard_bins=lo).p_noise


def test_snr_rejects_bad_tones():
    with pytest.raises(AnalysisError):
        snr_estimate(tone(70e6, 1.0))
    with pytest.raises(AnalysisError):
        snr_estimate(tone(10e3, 1000.0))


# ------------------------------------------------------- display chain


def test_bandpass_passes_band_and_rejects_outside():
    fs = 80e6
    h = bandpass_taps(2e6, 8e6, fs)
    assert len(h) % 2 == 1
    w = np.fft.rfft(h, 1 << 16)
    f = np.fft.rfftfreq(1 << 16, 1 / fs)
    mag = 20 * np.log10(np.abs(w) + 1e-300)
    band = (f >= 2e6) & (f <= 8e6)
    assert np.abs(mag[band]).max() < 0.1
    assert mag[f == 0][0] < -45 and mag[f >= 16e6].max() < -45


def test_bandpass_zero_phase():
    fs = 80e6
    n = np.arange(4000)
    x = np.cos(2 * np.pi * 5e6 * n / fs)
    y = bandpass(SampleBlock(x[None, :], 0, fs), 2e6, 8e6).data[0]
    mid = slice(500, 3500)
    assert np.max(np.abs(y[mid] - x[mid])) < 0.01


def test_bandpass_rejects_bad_band():
    with pytest.raises(AnalysisError):
        bandpass_taps(8e6, 2e6, 80e6)


def test_envelope_of_modulated_carrier():
    fs = 80e6
    n = np.arange(8000)
    a = 1 + 0.5 * np.sin(2 * np.pi * 0.1e6 * n / fs)
    x = a * np.cos(2 * np.pi * 5e6 * n / fs)
    env = envelope(SampleBlock(x[None, :], 0, fs)).data[0]
    assert np.max(np.abs(env[200:-200] - a[200:-200])) < 0.01
    assert not envelope(SampleBlock(np.zeros((2, 10)), 0, fs)).data.any()


def test_render_depth_axis():
    fs = 80e6
    frame = np.zeros((3, 4000))
    k = 2078  # 2 cm two-way at 1540 m/s is about 2078 samples
    frame[1, k] = 5.0
    img = render_image(SampleBlock(frame, 0, fs))
    assert img.data.max() == 1.0
    assert img.brightest == (1, k)
    assert img.brightest_depth_mm == pytest.approx(k / fs * 1540 / 2 * 1e3)
    one_way = render_image(SampleBlock(frame, 0, fs), two_way=False)
    assert one_way.brightest_depth_mm == pytest.approx(2 * img.brightest_depth_mm)
    blank = render_image(SampleBlock(np.zeros((2, 5)), 0, fs))
    assert not blank.data.any()


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_roundtrip(tmp_path, maxval):
    rng = np.random.default_rng(0)
    img = render_image(SampleBlock(rng.normal(size=(4, 30)), 0, 80e6))
    write_pgm(tmp_path / "a.pgm", img, maxval)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (30, 4)  # depth rows, channel columns
    assert np.max(np.abs(back - img.data.T)) <= 0.5 / maxval + 1e-12
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", img, 100)


def test_csv_writers(tmp_path):
    img = render_image(SampleBlock(np.eye(3), 0, 80e6))
    write_image_csv(tmp_path / "i.csv", img)
    assert (tmp_path / "i.csv").read_text().splitlines()[0] == "depth_mm,time_us,ch0,ch1,ch2"
    res = gain_curve([tone(2e6, 10.0), tone(3e6, 5.0)])
    write_gain_csv(tmp_path / "g.csv", res)
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 3
    write_snr_csv(tmp_path / "s.csv", [(5.1e6, snr_estimate(record_at_snr(40, 5.1e6)))])
    assert (tmp_path / "s.csv").read_text().startswith("frequency_hz,p_sig,p_noise,snr_db")
