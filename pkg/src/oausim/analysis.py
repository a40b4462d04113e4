"""Receive-path characterisation and RF display processing.

Gain from swept-sine peak-to-peak excursions, -3 dB corners by linear
interpolation, masked-FFT SNR, band-pass filtering, analytic-signal envelope
and grayscale rendering.
"""

import csv
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .samples import SampleBlock

RECORD_LENGTH = 32768


class AnalysisError(ValueError):
    pass


@dataclass
class SweepRecord:
    tone_frequency: float
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AnalysisError("a sweep record is a non-empty 1-D array")


def default_sweep_grid(sample_rate=125e6, step=0.2e6, start=0.2e6):
    """Tone grid from ``start`` towards Nyquist in ``step`` increments, with a
    final point just below Nyquist."""
    nyq = sample_rate / 2
    n = int(math.floor((nyq - start) / step + 1e-9)) + 1
    grid = start + step * np.arange(n)
    grid = grid[grid < nyq]
    last = nyq - 0.01e6
    if last > grid[-1] + 1e-3:
        grid = np.append(grid, last)
    return grid


def bandpass_response(f, f_lo, f_hi, order=1):
    """Magnitude of a Butterworth band-pass with -3 dB points exactly at
    ``f_lo`` and ``f_hi`` and unity gain at their geometric mean."""
    f = np.asarray(f, dtype=float)
    bw = f_hi - f_lo
    with np.errstate(divide="ignore"):
        x = (f * f - f_lo * f_hi) / (f * bw)
    return 1.0 / np.sqrt(1.0 + x ** (2 * order))


# --------------------------------------------------------------------- gain


@dataclass
class BandwidthResult:
    frequencies: np.ndarray
    a_pp: np.ndarray
    g_db: np.ndarray
    f_peak: float
    f_lo: float = None
    f_hi: float = None


def peak_to_peak(samples):
    x = np.asarray(samples)
    return float(x.max()) - float(x.min())


def gain_curve(records):
    """A_pp per tone and its gain in dB relative to the largest A_pp."""
    records = sorted(records, key=lambda r: r.tone_frequency)
    if len(records) < 2:
        raise AnalysisError("a gain curve needs at least two tones")
    f = np.array([r.tone_frequency for r in records], dtype=float)
    app = np.array([peak_to_peak(r.samples) for r in records])
    zero = np.flatnonzero(app <= 0)
    if zero.size:
        raise AnalysisError(f"gain undefined for tone(s) at {f[zero].tolist()} Hz: record has no excursion")
    g = 20.0 * np.log10(app / app.max())
    return BandwidthResult(f, app, g, float(f[np.argmax(app)]))


def _crossing(f, g, i, j):
    """Interpolated -3 dB frequency between grid points ``i`` and ``j``."""
    if g[j] == g[i]:
        return float(f[j])
    return float(f[i] + (-3.0 - g[i]) * (f[j] - f[i]) / (g[j] - g[i]))


def corners_3db(result):
    """First -3 dB crossings either side of the peak; ``None`` when absent.
    Also stored on ``result``."""
    f, g = result.frequencies, result.g_db
    p = int(np.argmax(g))
    lo = hi = None
    for i in range(p - 1, -1, -1):
        if g[i] <= -3.0:
            lo = _crossing(f, g, i + 1, i)
            break
    for i in range(p + 1, len(g)):
        if g[i] <= -3.0:
            hi = _crossing(f, g, i - 1, i)
            break
    result.f_lo, result.f_hi = lo, hi
    return lo, hi


# ---------------------------------------------------------------------- SNR


@dataclass
class SnrResult:
    p_sig: float
    p_noise: float
    snr_db: float
    f0_bin: int
    span: int
    mask: list = field(default_factory=list)  # (label, lo_bin, hi_bin) inclusive
    noise_bins: np.ndarray = field(default=None, repr=False)


def _alias_bin(freq, fs, n):
    f = math.fmod(freq, fs)
    if f > fs / 2:
        f = fs - f
    return int(round(f * n / fs))


def snr_estimate(
    record,
    f0=None,
    span_bins=8,
    span_fraction=0.01,
    harmonic_guards=3,
    subharmonic_guards=1,
    guard_bins=8,
    noise_start=1e6,
    dc_bins=None,
    beta=14.5,
):
    """In-band SNR of one tone record.

    The mean-removed record is Kaiser-windowed and transformed; signal power
    is the sum of bin powers within ``span`` of the fundamental, where span is
    the larger of ``span_bins`` and ``span_fraction`` of the fundamental bin.
    Noise is summed from ``noise_start`` to Nyquist over bins outside the DC
    region, the fundamental span, ``harmonic_guards`` harmonics (aliased) and
    ``subharmonic_guards`` subharmonics, each guarded by ``guard_bins``.
    """
    x = np.asarray(record.samples, dtype=np.float64)
    fs = record.sample_rate
    n = x.size
    f0 = record.tone_frequency if f0 is None else f0
    if not 0 < f0 < fs / 2:
        raise AnalysisError("f0 must lie in (0, fs/2)")
    spec = np.fft.rfft((x - x.mean()) * np.kaiser(n, beta))
    pw = np.abs(spec) ** 2
    nb = pw.size
    k0 = int(round(f0 * n / fs))
    span = max(int(span_bins), int(math.ceil(span_fraction * k0)))
    dc = span if dc_bins is None else int(dc_bins)
    if k0 - span <= dc:
        raise AnalysisError(f"fundamental bin {k0} falls inside the DC exclusion (0..{dc} bins)")

    masked = np.zeros(nb, dtype=bool)
    mask = []

    def _mask(label, lo, hi):
        lo, hi = max(lo, 0), min(hi, nb - 1)
        if lo <= hi:
            masked[lo : hi + 1] = True
            mask.append((label, lo, hi))

    _mask("dc", 0, dc)
    _mask("fundamental", k0 - span, k0 + span)
    for h in range(2, 2 + harmonic_guards):
        kb = _alias_bin(h * f0, fs, n)
        _mask(f"h{h}", kb - guard_bins, kb + guard_bins)
    for m in range(2, 2 + subharmonic_guards):
        kb = int(round(f0 / m * n / fs))
        _mask(f"sub{m}", kb - guard_bins, kb + guard_bins)

    band = np.arange(nb) * fs / n >= noise_start
    noise_idx = np.flatnonzero(band & ~masked)
    sig_idx = np.arange(k0 - span, min(k0 + span, nb - 1) + 1)
    p_sig = float(pw[sig_idx].sum())
    p_noise = float(pw[noise_idx].sum())
    if p_sig <= 0:
        raise AnalysisError("no signal power at the fundamental")
    if p_noise <= 0:
        # noiseless and unquantised record; report an infinite SNR
        return SnrResult(p_sig, 0.0, math.inf, k0, span, mask, noise_idx)
    return SnrResult(p_sig, p_noise, 10.0 * math.log10(p_sig / p_noise), k0, span, mask, noise_idx)


# ------------------------------------------------------------ RF display


def _as_block(frame):
    if isinstance(frame, SampleBlock):
        return frame
    return SampleBlock(np.atleast_2d(np.asarray(frame)), 0, 1.0)


def bandpass_taps(f_lo, f_hi, sample_rate, stopband_db=50.0):
    """Kaiser windowed-sinc band-pass, odd length, flat over ``[f_lo, f_hi]``.
    Transition bands are ``min(f_lo / 2, fs/2 - f_hi)`` wide outside the band."""
    nyq = sample_rate / 2
    if not 0 < f_lo < f_hi < nyq:
        raise AnalysisError("band must satisfy 0 < f_lo < f_hi < fs/2")
    width = min(0.5 * f_lo, nyq - f_hi)
    numtaps, beta = sps.kaiserord(stopband_db, width / nyq)
    numtaps |= 1
    return sps.firwin(numtaps, [f_lo - width / 2, f_hi + width / 2], window=("kaiser", beta), pass_zero=False, fs=sample_rate)


def bandpass(frame, f_lo, f_hi, stopband_db=50.0):
    """Zero-phase (delay-compensated) band-pass along time, float output."""
    blk = _as_block(frame)
    h = bandpass_taps(f_lo, f_hi, blk.sample_rate, stopband_db)
    x = blk.data.astype(np.float64)
    y = sps.oaconvolve(x, h[None, :], mode="same", axes=1)
    return SampleBlock(y, blk.start_index, blk.sample_rate)


def envelope(frame):
    """Magnitude of the analytic signal along time."""
    blk = _as_block(frame)
    x = blk.data.astype(np.float64)
    if not x.any():
        return SampleBlock(np.zeros_like(x), blk.start_index, blk.sample_rate)
    return SampleBlock(np.abs(sps.hilbert(x, axis=1)), blk.start_index, blk.sample_rate)


@dataclass
class RfImage:
    """``data`` is channels x depth samples in [0, 1]."""

    data: np.ndarray
    depth_mm: np.ndarray
    time_us: np.ndarray

    @property
    def brightest(self):
        """(channel, depth sample) of the maximum."""
        c, k = np.unravel_index(int(np.argmax(self.data)), self.data.shape)
        return int(c), int(k)

    @property
    def brightest_depth_mm(self):
        return float(self.depth_mm[self.brightest[1]])


def render_image(frame, sample_rate=None, sound_speed=1540.0, t0_samples=None, two_way=True):
    """Normalise ``|frame|`` by its maximum. Depth is ``c t / 2`` for
    pulse-echo and ``c t`` for one-way (optoacoustic) propagation, with ``t``
    measured from ``t0_samples`` (default: the frame's start index)."""
    if isinstance(frame, SampleBlock):
        x, fs, start = frame.data, frame.sample_rate, frame.start_index
    else:
        rows = [np.asarray(r) for r in frame]
        if len({r.size for r in rows}) > 1:
            raise AnalysisError("channel records must have equal length")
        x, fs, start = np.vstack(rows), 1.0, 0
    fs = sample_rate or fs
    mag = np.abs(np.asarray(x, dtype=np.float64))
    top = mag.max() if mag.size else 0.0
    img = mag / top if top > 0 else np.zeros_like(mag)
    t0 = start if t0_samples is None else t0_samples
    t = (start - t0 + np.arange(img.shape[1])) / fs
    depth = t * sound_speed * (0.5 if two_way else 1.0) * 1e3
    return RfImage(img, depth, t * 1e6)


def write_pgm(path, image, maxval=255):
    """Binary portable graymap (P5), depth down the rows and channels across."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    data = image.data if isinstance(image, RfImage) else np.asarray(image)
    pix = np.rint(np.clip(data.T, 0.0, 1.0) * maxval)
    pix = pix.astype(">u2" if maxval > 255 else np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    dt = ">u2" if maxval > 255 else np.uint8
    # exactly one whitespace byte separates the header from the raster
    pix = np.frombuffer(raw, dtype=dt, count=w * h, offset=m.end()).reshape(h, w)
    return pix.astype(np.float64) / maxval


def write_image_csv(path, image):
    """Header ``depth_mm,time_us,ch0..``; one row per depth sample."""
    table = np.column_stack((image.depth_mm, image.time_us, image.data.T))
    header = "depth_mm,time_us," + ",".join(f"ch{c}" for c in range(image.data.shape[0]))
    np.savetxt(path, table, fmt="%.6g", delimiter=",", header=header, comments="")


def write_gain_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz", "a_pp", "g_db"])
        for f, a, g in zip(result.frequencies, result.a_pp, result.g_db):
            w.writerow([f"{f:.1f}", f"{a:.1f}", f"{g:.6f}"])


def write_snr_csv(path, rows):
    """``rows`` are ``(frequency_hz, SnrResult)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz", "p_sig", "p_noise", "snr_db", "span_bins"])
        for f, r in rows:
            w.writerow([f"{f:.1f}", f"{r.p_sig:.6e}", f"{r.p_noise:.6e}", f"{r.snr_db:.4f}", r.span])
