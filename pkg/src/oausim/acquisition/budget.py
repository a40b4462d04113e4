"""Leaky-bucket capacity model for the acquisition ring buffer.

The writer fills the buffer at ``r_in`` while the transport drains it at
``r_out`` after a worst-case read-start latency ``tau_s``. Streaming frames
back to back at the highest sustainable rate ``r_out / L``, the buffer peaks
at the end of each frame write at ``L (1 - r_out/r_in) + r_out tau_s``, which
bounds the frame length::

    L_max = r_in (B - r_out tau_s) / (r_in - r_out)        [bits]

:func:`simulate_occupancy` checks that bound independently with an
event-driven, block-granular simulation.
"""

import csv
import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

log = logging.getLogger(__name__)

MIB = 1 << 20

# Read-start latency that reproduces the measured 5639 samples/channel for a
# 4 MiB buffer, 256 ch x 16 bit at 80 MSPS and 95.6 Gb/s readout. Any value in
# (179.841, 179.871] us floors to 5639; this is the midpoint.
REFERENCE_TAU_S = 179.856e-6
# Same back-solve if the 4 MB buffer is read as 4e6 bytes: (163.581, 163.612] us.
REFERENCE_TAU_S_DECIMAL = 163.596e-6

UNBOUNDED = math.inf


class CapacityError(ValueError):
    """Requested frame does not fit the leaky-bucket budget."""


@dataclass(frozen=True)
class LeakyBucketModel:
    r_in: float
    r_out: float
    buffer_bits: float
    tau_s: float = 0.0
    channels: int = 256
    bits_per_sample: int = 16

    def __post_init__(self):
        if self.r_in <= 0:
            raise ValueError("r_in must be positive")
        if self.r_out < 0 or self.buffer_bits <= 0 or self.tau_s < 0:
            raise ValueError("r_out, tau_s must be >= 0 and buffer_bits > 0")
        if self.channels <= 0 or self.bits_per_sample <= 0:
            raise ValueError("channels and bits_per_sample must be positive")

    @classmethod
    def from_acquisition(
        cls,
        channels=256,
        bits_per_sample=16,
        sample_rate=80e6,
        buffer_bytes=4 * MIB,
        r_out=95.6e9,
        tau_s=REFERENCE_TAU_S,
    ):
        return cls(channels * bits_per_sample * sample_rate, r_out, buffer_bytes * 8, tau_s, channels, bits_per_sample)

    @property
    def bits_per_instant(self):
        return self.channels * self.bits_per_sample


def max_frame_bits(model):
    """Closed-form L_max in bits (exact rational), ``inf`` when unbounded."""
    r_in, r_out = Fraction(model.r_in), Fraction(model.r_out)
    if r_in <= r_out:
        return UNBOUNDED
    head = Fraction(model.buffer_bits) - r_out * Fraction(model.tau_s)
    if head <= 0:
        return Fraction(0)
    return r_in * head / (r_in - r_out)


def max_frame_length(model):
    """Longest frame in samples per channel, floored; ``math.inf`` when the
    readout keeps up with the writer."""
    bits = max_frame_bits(model)
    if bits == UNBOUNDED:
        return UNBOUNDED
    if bits == 0:
        log.warning(
            "buffer of %.0f bits is exhausted by the read-start latency (r_out * tau_s = %.0f bits)",
            model.buffer_bits,
            model.r_out * model.tau_s,
        )
        return 0
    return math.floor(bits / model.bits_per_instant)


def max_fps(model, frame_len):
    """Sustainable frame rate ``r_out / frame_bits`` for ``frame_len`` samples
    per channel. Raises :class:`CapacityError` beyond :func:`max_frame_length`."""
    if frame_len <= 0:
        raise ValueError("frame_len must be positive")
    limit = max_frame_length(model)
    if frame_len > limit:
        raise CapacityError(f"frame of {frame_len} samples exceeds the {limit} sample limit")
    if math.isinf(limit):
        # readout outpaces the writer; frames are limited by the write time
        return model.r_in / (frame_len * model.bits_per_instant)
    return model.r_out / (frame_len * model.bits_per_instant)


@dataclass
class OccupancyResult:
    peak_bits: float
    overflow: bool
    peak_time: float
    n_frames: int
    blocks_per_frame: int
    frame_period: float


def simulate_occupancy(model, frame_len, block_size=256 * 1024, duration=None, n_frames=None, frame_period=None):
    """Event-driven check of buffer occupancy.

    Frames of ``frame_len`` samples per channel start every ``frame_period``
    seconds (default: ``frame_bits / r_out``, i.e. back to back at the
    sustainable rate). Each is written at ``r_in`` and completes block by
    block. The reader serves blocks in order at ``r_out``; it may begin a
    block only once the block is complete and no earlier than ``tau_s`` after
    its frame started. Bits leave the buffer as they are read.

    ``duration`` (seconds) sets the number of frames; default three, enough to
    reach steady state. Overflow means occupancy above ``buffer_bits``.
    """
    if frame_len <= 0 or block_size <= 0:
        raise ValueError("frame_len and block_size must be positive")
    r_in, r_out, tau = model.r_in, model.r_out, model.tau_s
    fb = float(frame_len * model.bits_per_instant)
    bb = float(block_size * 8)
    nb = int(math.ceil(fb / bb))
    sizes = np.full(nb, bb)
    sizes[-1] = fb - bb * (nb - 1)
    write_time = fb / r_in
    if frame_period is None:
        frame_period = fb / r_out if r_out > 0 else math.inf
    frame_period = max(frame_period, write_time)
    if n_frames is None:
        if math.isinf(frame_period):
            n_frames = 1
        elif duration is not None:
            n_frames = max(2, int(math.ceil(duration / frame_period)))
        else:
            n_frames = 3
    starts = np.arange(n_frames) * (frame_period if n_frames > 1 else 0.0)

    complete = starts[:, None] + np.cumsum(sizes)[None, :] / r_in
    if r_out > 0:
        gate = np.maximum(complete, (starts + tau)[:, None]).ravel()
        d = np.tile(sizes, n_frames) / r_out
        D = np.cumsum(d)
        end = D + np.maximum.accumulate(gate - (D - d))
        rstart = end - d
        rsize = np.tile(sizes, n_frames)
        read_before = np.concatenate(([0.0], np.cumsum(rsize)[:-1]))
        cand = np.concatenate((starts + write_time, rstart))
    else:
        rstart = np.empty(0)
        cand = starts + write_time

    written = np.clip((cand[:, None] - starts[None, :]) * r_in, 0.0, fb).sum(axis=1)
    if r_out > 0:
        k = np.searchsorted(rstart, cand, side="right") - 1
        kk = np.maximum(k, 0)
        got = read_before[kk] + np.clip((cand - rstart[kk]) * r_out, 0.0, rsize[kk])
        read = np.where(k >= 0, got, 0.0)
    else:
        read = np.zeros_like(cand)
    occ = written - read
    i = int(np.argmax(occ))
    peak = float(occ[i])
    # relative slack only absorbs float rounding; one extra sample is far larger
    overflow = peak > model.buffer_bits * (1 + 1e-12)
    return OccupancyResult(peak, overflow, float(cand[i]), n_frames, nb, frame_period)


def oracle_max_frame_length(model, block_size=256 * 1024, n_frames=3, hi=None):
    """Largest frame the simulation accepts, by bisection."""
    lo = 1
    if simulate_occupancy(model, lo, block_size, n_frames=n_frames).overflow:
        return 0
    if hi is None:
        hi = 2
        while not simulate_occupancy(model, hi, block_size, n_frames=n_frames).overflow:
            hi *= 2
            if hi > 1 << 40:
                return UNBOUNDED
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if simulate_occupancy(model, mid, block_size, n_frames=n_frames).overflow:
            hi = mid
        else:
            lo = mid
    return lo


# ------------------------------------------------------------------- budgets

BUDGET_COLUMNS = ("channels", "bits", "fs", "B", "R_out", "tau_s", "L_f_max", "FPS_max", "frame_len", "FPS", "status")


def budget_row(channels, bits, fs, buffer_bytes, r_out, tau_s, frame_len=None):
    model = LeakyBucketModel.from_acquisition(channels, bits, fs, buffer_bytes, r_out, tau_s)
    lmax = max_frame_length(model)
    row = dict(channels=channels, bits=bits, fs=fs, B=buffer_bytes * 8, R_out=r_out, tau_s=tau_s)
    if math.isinf(lmax):
        row.update(L_f_max="unbounded", FPS_max="", status="unbounded")
    elif lmax == 0:
        row.update(L_f_max=0, FPS_max=0.0, status="infeasible")
    else:
        row.update(L_f_max=lmax, FPS_max=model.r_out / (lmax * model.bits_per_instant), status="ok")
    row["frame_len"] = frame_len if frame_len is not None else ""
    row["FPS"] = ""
    if frame_len is not None:
        try:
            row["FPS"] = max_fps(model, frame_len)
        except CapacityError:
            row["status"] = "exceeds"
    return row


def reference_rows(tau_s=REFERENCE_TAU_S):
    return [
        budget_row(256, 16, 80e6, 4 * MIB, 95.6e9, tau_s),
        budget_row(256, 16, 80e6, 4 * MIB, 95.6e9, tau_s, frame_len=2000),
    ]


def budget_table(channels=(256,), bits=(16,), fs=(80e6,), buffer_bytes=(4 * MIB,), r_out=(95.6e9,), tau_s=(REFERENCE_TAU_S,), frame_len=(None,)):
    rows = reference_rows()
    for c in channels:
        for b in bits:
            for f in fs:
                for B in buffer_bytes:
                    for ro in r_out:
                        for t in tau_s:
                            for fl in frame_len:
                                rows.append(budget_row(c, b, f, B, ro, t, fl))
    return rows


def write_budget_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BUDGET_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in BUDGET_COLUMNS})
