"""Simulated 16-channel ultrasound front-end.

Signals are synthesised in ADC codes (LSB at 0 dB gain), scaled by the
programmed gain, corrupted with white Gaussian noise, rounded and clipped to
the symmetric int16 range. Output is a pull-based stream of
:class:`~oausim.samples.SampleBlock` that is continuous across calls.
"""

import logging
import math
import struct
from dataclasses import dataclass, fields

import numpy as np
from scipy import signal as sps

from .samples import SampleBlock

log = logging.getLogger(__name__)

FULL_SCALE = 32767
GAIN_RANGE_DB = (-3.0, 48.0)
SCENARIO_KINDS = ("dc", "swept_sine", "pulse_echo", "oa_pulse", "prbs")


@dataclass
class AfeConfig:
    channels: int = 16
    mode: str = "raw"
    sample_rate: float = 80e6
    gain_db: float = 0.0
    active_termination: bool = True
    noise_rms: float = 0.0
    iq_center: float = 5e6
    iq_decimation: int = 2

    def __post_init__(self):
        if self.mode not in ("raw", "iq"):
            raise ValueError(f"mode must be 'raw' or 'iq', got {self.mode!r}")
        lo, hi = GAIN_RANGE_DB
        if not lo <= self.gain_db <= hi:
            raise ValueError(f"gain {self.gain_db} dB outside [{lo}, {hi}] dB")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if not 0 < self.sample_rate <= 125e6:
            raise ValueError("sample rate must be in (0, 125 MSPS]")
        if self.noise_rms < 0:
            raise ValueError("noise_rms must be >= 0")

    @property
    def gain(self):
        return 10.0 ** (self.gain_db / 20.0)

    def payload_rate(self, channels=None, bits=16):
        """Raw payload bit rate for ``channels`` (default: all) channels."""
        return (channels or self.channels) * bits * self.sample_rate


@dataclass
class SignalScenario:
    """Stimulus description.

    ``pulse_times`` are transmit / laser instants in (possibly fractional)
    sample-clock units. ``channels`` lists the 0-based channels that carry the
    signal (``None`` means all).
    """

    kind: str = "dc"
    amplitude: float = 0.0
    frequency: float = 1e6
    phase: float = 0.0
    echoes: tuple = ()
    center_frequency: float = 5e6
    cycles: float = 3.0
    sound_speed: float = 1540.0
    pulse_times: tuple = ()
    oa_delay: float = 10e-6
    oa_width: float = 100e-9
    channels: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        self.echoes = tuple(tuple(map(float, e)) for e in self.echoes)
        self.pulse_times = tuple(float(t) for t in self.pulse_times)
        if self.channels is not None:
            self.channels = tuple(int(c) for c in self.channels)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario keys: {sorted(extra)}")
        return cls(**d)

    def echo_sample(self, depth, fs, pulse_time=0.0):
        """Sample index of the centre of the echo from ``depth`` metres."""
        return int(round(pulse_time + 2.0 * depth / self.sound_speed * fs))


def _burst(n_idx, center, fc, fs, cycles):
    half = 0.5 * cycles / fc * fs
    x = n_idx - center
    inside = np.abs(x) <= half
    w = np.where(inside, 0.5 * (1.0 + np.cos(np.pi * x / half)), 0.0)
    return w * np.cos(2 * np.pi * fc * x / fs), half


class FrontEnd:
    """Stateful generator; successive :meth:`read` calls continue the stream."""

    def __init__(self, scenario, config, start_index=0):
        self.scenario = scenario
        self.config = config
        self.index = int(start_index)
        self.saturation_count = 0
        self._rng_noise = np.random.default_rng([scenario.seed, 1])
        self._rng_prbs = np.random.default_rng([scenario.seed, 2])

    def _clean(self, n):
        sc, cfg = self.scenario, self.config
        fs = cfg.sample_rate
        idx = np.arange(self.index, self.index + n, dtype=np.float64)
        x = np.zeros(n)
        if sc.kind == "dc":
            x[:] = sc.amplitude
        elif sc.kind == "swept_sine":
            # phase from the exact fractional cycle count keeps long streams precise
            cyc = np.mod(idx * (sc.frequency / fs), 1.0)
            x = sc.amplitude * np.cos(2 * np.pi * cyc + sc.phase)
        elif sc.kind == "prbs":
            x = self._rng_prbs.uniform(-sc.amplitude, sc.amplitude, n)
        elif sc.kind == "pulse_echo":
            for p in sc.pulse_times:
                for depth, refl in sc.echoes:
                    c = sc.echo_sample(depth, fs, p)
                    half = 0.5 * sc.cycles / sc.center_frequency * fs
                    lo = max(int(math.floor(c - half)), self.index)
                    hi = min(int(math.ceil(c + half)) + 1, self.index + n)
                    if lo >= hi:
                        continue
                    seg, _ = _burst(np.arange(lo, hi, dtype=np.float64), c, sc.center_frequency, fs, sc.cycles)
                    x[lo - self.index : hi - self.index] += refl * sc.amplitude * seg
        elif sc.kind == "oa_pulse":
            sigma = 0.5 * sc.oa_width * fs
            for p in sc.pulse_times:
                c = p + sc.oa_delay * fs
                lo = max(int(math.floor(c - 6 * sigma)), self.index)
                hi = min(int(math.ceil(c + 6 * sigma)) + 1, self.index + n)
                if lo >= hi:
                    continue
                u = (np.arange(lo, hi) - c) / sigma
                # bipolar N-shaped pulse, extrema +-amplitude at u = -+1
                x[lo - self.index : hi - self.index] += -sc.amplitude * u * np.exp(0.5 - 0.5 * u * u)
        return x

    def read(self, n):
        if n <= 0:
            raise ValueError("n must be positive")
        cfg, sc = self.config, self.scenario
        clean = self._clean(n) * cfg.gain
        out = np.zeros((cfg.channels, n))
        chans = range(cfg.channels) if sc.channels is None else [c for c in sc.channels if c < cfg.channels]
        for c in chans:
            out[c] = clean
        if cfg.noise_rms > 0:
            # draw time-major so the stream is independent of the block split
            out += self._rng_noise.normal(0.0, cfg.noise_rms, (n, cfg.channels)).T
        q = np.rint(out)
        sat = np.abs(q) > FULL_SCALE
        if sat.any():
            self.saturation_count += int(sat.sum())
            log.debug("clipped %d samples", int(sat.sum()))
        q = np.clip(q, -FULL_SCALE, FULL_SCALE).astype(np.int16)
        block = SampleBlock(q, self.index, cfg.sample_rate)
        self.index += n
        return block

    def stream(self, total, block_size=4096):
        left = int(total)
        while left > 0:
            k = min(block_size, left)
            yield self.read(k)
            left -= k


def generate(scenario, config, n, block_size=None, start_index=0):
    """Generate ``n`` samples per channel as a list of blocks."""
    if n <= 0:
        raise ValueError("n must be positive")
    fe = FrontEnd(scenario, config, start_index)
    return list(fe.stream(n, block_size or n))


def iq_filter_taps(decimation, stopband_db=60.0):
    """Low-pass FIR for the demodulator, normalised to the input rate.

    Passband to 0.4 and stopband from 0.5 of the output rate.
    """
    fs_out = 1.0 / decimation
    width = 0.1 * fs_out
    numtaps, beta = sps.kaiserord(stopband_db + 3.0, width / 0.5)
    numtaps |= 1
    return sps.firwin(numtaps, 0.45 * fs_out, window=("kaiser", beta), fs=1.0)


class IqDemodulator:
    """Streaming mixer + decimating low-pass. Output rows are
    ``I0, Q0, I1, Q1, ...`` scaled so a tone of amplitude A gives |I+jQ| = A."""

    def __init__(self, f_center, decimation, sample_rate, channels, taps=None):
        if decimation < 2:
            raise ValueError("decimation must be >= 2")
        if not 0 <= f_center < sample_rate / 2:
            raise ValueError("f_center must lie in [0, fs/2)")
        self.f_center = f_center
        self.decimation = int(decimation)
        self.sample_rate = sample_rate
        self.taps = iq_filter_taps(decimation) if taps is None else np.asarray(taps, float)
        self._zi = np.zeros((channels, self.taps.size - 1), dtype=complex)
        self._next = None

    def process(self, block):
        if self._next is not None and block.start_index != self._next:
            raise ValueError("I/Q input must be continuous")
        self._next = block.end_index
        idx = np.arange(block.start_index, block.end_index, dtype=np.float64)
        cyc = np.mod(idx * (self.f_center / self.sample_rate), 1.0)
        mixed = 2.0 * block.data.astype(np.float64) * np.exp(-2j * np.pi * cyc)[None, :]
        filt, self._zi = sps.lfilter(self.taps, 1.0, mixed, axis=1, zi=self._zi)
        keep = np.flatnonzero((np.arange(block.start_index, block.end_index) % self.decimation) == 0)
        z = filt[:, keep]
        out = np.empty((2 * z.shape[0], z.shape[1]))
        out[0::2] = z.real
        out[1::2] = z.imag
        out = np.clip(np.rint(out), -FULL_SCALE, FULL_SCALE).astype(np.int16)
        first = -(-block.start_index // self.decimation)
        return SampleBlock(out, first, self.sample_rate / self.decimation)


def iq_demodulate(blocks, f_center, decimation, taps=None):
    if isinstance(blocks, SampleBlock):
        blocks = [blocks]
    blocks = list(blocks)
    if not blocks:
        return []
    b0 = blocks[0]
    dem = IqDemodulator(f_center, decimation, b0.sample_rate, b0.channels, taps)
    return [dem.process(b) for b in blocks]


def iq_to_complex(block):
    d = block.data.astype(np.float64)
    return d[0::2] + 1j * d[1::2]


# ------------------------------------------------------------------ file I/O

_DUMP = struct.Struct("<4sHHQqd")
DUMP_MAGIC = b"AFES"


def write_dump(path, block):
    """Binary dump: 32-byte header (magic ``AFES``, u16 version=1, u16
    channels, u64 samples per channel, i64 start index, f64 sample rate)
    followed by little-endian int16 samples, channel-major."""
    with open(path, "wb") as fh:
        fh.write(_DUMP.pack(DUMP_MAGIC, 1, block.channels, block.n, int(block.start_index), float(block.sample_rate)))
        fh.write(np.ascontiguousarray(block.data, dtype="<i2").tobytes())


def read_dump(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, ch, n, start, fs = _DUMP.unpack_from(raw)
    if magic != DUMP_MAGIC or version != 1:
        raise ValueError("not a sample dump")
    data = np.frombuffer(raw, dtype="<i2", count=ch * n, offset=_DUMP.size).reshape(ch, n)
    return SampleBlock(data.astype(np.int16), start, fs)


def write_csv(path, block):
    idx = np.arange(block.start_index, block.end_index)
    table = np.column_stack((idx, block.data.T))
    header = "sample_index," + ",".join(f"ch{c}" for c in range(block.channels))
    np.savetxt(path, table, fmt="%d", delimiter=",", header=header, comments="")
