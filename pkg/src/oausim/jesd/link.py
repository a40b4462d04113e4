"""Subclass-1 style serial link: transmitter and receiver state machines.

Timeline units are octet-clock ticks, ``tick = frame_index * F + octet``. One
frame carries one sample per converter, so the frame index equals the
sample-clock index of the samples it carries. Multiframe (LMFC) boundaries sit
at frame indices ``sysref_phase + n*K``.

TX sequence per lane: ``cgs_frames`` frames of K28.5, four ILA multiframes,
then (optionally scrambled) data starting on an LMFC boundary. Frame octets
are channel-interleaved big-endian samples ``ch0 MSB, ch0 LSB, ch1 MSB, ...``;
lane ``l`` carries octets ``[l*F, (l+1)*F)`` of every frame.

RX releases frame ``j`` from the elastic buffers at tick
``T0 + R + (j+1)*F`` where ``T0`` is the data-start tick (fixed by the SYNC
handshake relative to SYSREF) and ``R`` is the elastic depth rounded up to a
whole multiframe. Any lane skew up to the elastic depth is absorbed without
changing that release time.
"""

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..samples import SampleBlock, concat_blocks
from . import kernels
from .codec import K28_0, K28_3, K28_4, K28_5

ILA_MULTIFRAMES = 4


class LinkError(RuntimeError):
    pass


class LinkConfigError(LinkError):
    """ILA content disagrees with the receiver's link parameters."""


class LinkAlignmentError(LinkError):
    """Lane skew exceeds the elastic buffer or lanes are out of step."""


@dataclass(frozen=True)
class LinkParams:
    lanes: int = 1
    octets_per_frame: int = 16
    frames_per_multiframe: int = 32
    scrambling: bool = False
    elastic_depth: int = None  # octets; defaults to two multiframes
    frame_clock: float = 80e6
    device_id: int = 0
    cgs_frames: int = 32
    lock_threshold: int = 4
    lock_loss_count: int = 3
    lock_loss_window: int = 16

    def __post_init__(self):
        if self.lanes < 1 or self.octets_per_frame < 1 or self.frames_per_multiframe < 1:
            raise ValueError("lanes, F and K must be positive")
        if (self.lanes * self.octets_per_frame) % 2:
            raise ValueError("lanes * F must be even (16-bit samples)")
        if not 1 <= self.octets_per_frame <= 256 or not 1 <= self.frames_per_multiframe <= 256:
            raise ValueError("F and K must fit in one ILA octet")
        if self.octets_per_multiframe < 9:
            raise ValueError("a multiframe must hold /R/, /Q/, six ILA octets and /A/")
        if self.elastic_depth is None:
            object.__setattr__(self, "elastic_depth", 2 * self.octets_per_multiframe)
        if self.elastic_depth < 0:
            raise ValueError("elastic_depth must be >= 0")
        if self.cgs_frames % self.frames_per_multiframe:
            raise ValueError("cgs_frames must be a whole number of multiframes")
        if self.cgs_frames * self.octets_per_frame < self.lock_threshold:
            raise ValueError("CGS too short for the lock threshold")

    @property
    def F(self):
        return self.octets_per_frame

    @property
    def K(self):
        return self.frames_per_multiframe

    @property
    def channels(self):
        return self.lanes * self.octets_per_frame // 2

    @property
    def octets_per_multiframe(self):
        return self.octets_per_frame * self.frames_per_multiframe

    @property
    def line_rate(self):
        """Per-lane serial rate in bit/s (8b/10b expanded)."""
        return self.frame_clock * self.octets_per_frame * 10

    @property
    def payload_rate(self):
        return self.frame_clock * self.octets_per_frame * 8 * self.lanes

    @property
    def sysref_frequency(self):
        return self.frame_clock / self.frames_per_multiframe

    @property
    def release_offset(self):
        """Elastic release point after data start, in octets."""
        mf = self.octets_per_multiframe
        return math.ceil(self.elastic_depth / mf) * mf


@dataclass(frozen=True)
class IlaConfig:
    device_id: int
    lane_id: int
    F: int
    K: int
    scrambling: bool
    checksum: int = None

    def __post_init__(self):
        if self.checksum is None:
            object.__setattr__(self, "checksum", sum(self._body()) & 0xFF)

    def _body(self):
        return [self.device_id & 0xFF, self.lane_id & 0xFF, (self.F - 1) & 0xFF, (self.K - 1) & 0xFF, int(self.scrambling)]

    def octets(self):
        return np.array(self._body() + [self.checksum], dtype=np.uint8)

    @classmethod
    def from_octets(cls, raw):
        did, lid, f1, k1, scr, chk = (int(v) for v in raw[:6])
        return cls(did, lid, f1 + 1, k1 + 1, bool(scr & 1), chk)

    @property
    def checksum_ok(self):
        return self.checksum == (sum(self._body()) & 0xFF)


@dataclass
class LaneStream:
    lane_id: int
    symbols: np.ndarray
    is_control: np.ndarray
    start_tick: int = 0

    def __len__(self):
        return int(self.symbols.size)


@dataclass
class LinkStatus:
    lanes: int
    cgs_locked: list = field(default_factory=list)
    ila_valid: list = field(default_factory=list)
    lane_skew: list = field(default_factory=list)
    symbol_errors: list = field(default_factory=list)
    disparity_errors: list = field(default_factory=list)
    resync_events: list = field(default_factory=list)
    latency_octets: int = None
    latency_frames: int = None
    data_start_index: int = None
    frames_released: int = 0


def lmfc_boundary_at_or_after(index, sysref_phase, K):
    return sysref_phase + math.ceil((index - sysref_phase) / K) * K


def _frames_to_octets(data):
    """(channels, n) int16 -> (n, 2*channels) big-endian octets."""
    return np.ascontiguousarray(data.T).astype(">i2").view(np.uint8).reshape(data.shape[1], -1)


def _octets_to_frames(octets, channels):
    n = octets.shape[0]
    return np.ascontiguousarray(octets).view(">i2").reshape(n, channels).astype(np.int16).T.copy()


class LinkTransmitter:
    """Frames a continuous sample stream onto the lanes of one link."""

    def __init__(self, params, sysref_phase=0):
        self.params = params
        self.sysref_phase = int(sysref_phase)
        self.data_start_index = None
        self.dropped_samples = 0
        self._next_index = None
        self._rd = [-1] * params.lanes
        self._scr = [0] * params.lanes

    def ila_octets(self, lane_id):
        p = self.params
        mf = p.octets_per_multiframe
        octets = (np.arange(ILA_MULTIFRAMES * mf) & 0xFF).astype(np.uint8)
        ctrl = np.zeros(octets.size, dtype=np.uint8)
        for m in range(ILA_MULTIFRAMES):
            octets[m * mf], ctrl[m * mf] = K28_0, 1
            octets[m * mf + mf - 1], ctrl[m * mf + mf - 1] = K28_3, 1
        octets[mf + 1], ctrl[mf + 1] = K28_4, 1
        cfg = IlaConfig(p.device_id, lane_id, p.F, p.K, p.scrambling).octets()
        octets[mf + 2 : mf + 2 + cfg.size] = cfg
        return octets, ctrl

    def _preamble(self):
        p = self.params
        lanes = []
        for lane in range(p.lanes):
            cgs = np.full(p.cgs_frames * p.F, K28_5, dtype=np.uint8)
            ila, ila_k = self.ila_octets(lane)
            octets = np.concatenate((cgs, ila))
            ctrl = np.concatenate((np.ones(cgs.size, np.uint8), ila_k))
            syms, self._rd[lane] = kernels.encode_symbols(octets, ctrl, self._rd[lane])
            start = (self.data_start_index - ILA_MULTIFRAMES * p.K - p.cgs_frames) * p.F
            lanes.append(LaneStream(lane, syms, ctrl.astype(bool), start))
        return lanes

    def step(self, block):
        """Consume the next contiguous :class:`SampleBlock`; return per-lane
        symbol chunks (the preamble is prepended on the first call)."""
        p = self.params
        if block.channels != p.channels:
            raise ValueError(f"link carries {p.channels} channels, block has {block.channels}")
        if self._next_index is not None and block.start_index != self._next_index:
            raise ValueError("transmitter input must be a continuous stream")
        self._next_index = block.end_index
        preamble = None
        if self.data_start_index is None:
            self.data_start_index = lmfc_boundary_at_or_after(block.start_index, self.sysref_phase, p.K)
            preamble = self._preamble()
        usable = block.slice(self.data_start_index, block.end_index)
        self.dropped_samples += block.n - usable.n
        frames = _frames_to_octets(usable.data)
        out = []
        tick = usable.start_index * p.F
        for lane in range(p.lanes):
            octets = frames[:, lane * p.F : (lane + 1) * p.F].ravel()
            if p.scrambling:
                octets, self._scr[lane] = kernels.scramble(octets, self._scr[lane])
            syms, self._rd[lane] = kernels.encode_symbols(octets, 0, self._rd[lane])
            chunk = LaneStream(lane, syms, np.zeros(syms.size, bool), tick)
            if preamble is not None:
                pre = preamble[lane]
                chunk = LaneStream(
                    lane,
                    np.concatenate((pre.symbols, syms)),
                    np.concatenate((pre.is_control, chunk.is_control)),
                    pre.start_tick,
                )
            out.append(chunk)
        return out


def tx_link(samples, params, sysref_phase=0):
    """Encode a sample stream (one block or an iterable of contiguous blocks)."""
    if isinstance(samples, SampleBlock):
        samples = [samples]
    tx = LinkTransmitter(params, sysref_phase)
    parts = [tx.step(b) for b in samples]
    return [
        LaneStream(
            lane,
            np.concatenate([p[lane].symbols for p in parts]),
            np.concatenate([p[lane].is_control for p in parts]),
            parts[0][lane].start_tick,
        )
        for lane in range(params.lanes)
    ]


def apply_skew(lanes, skews):
    """Delay each lane by ``skews[l]`` octet-clock ticks.

    The delayed lane still shows CGS commas during the extra ticks; lanes are
    padded at the end with commas so all of them stay the same length.
    """
    if len(skews) != len(lanes):
        raise ValueError("one skew per lane")
    if min(skews) < 0:
        raise ValueError("skews must be non-negative")
    top = max(skews)
    out = []
    for lane, s in zip(lanes, skews):
        s = int(s)
        # commas flip disparity, so start the prefix where it ends on RD-
        rd0 = -1 if s % 2 == 0 else 1
        pre, _ = kernels.encode_symbols(np.full(s, K28_5, np.uint8), 1, rd0)
        *_, rd_end = kernels.decode_symbols(lane.symbols, -1)
        post, _ = kernels.encode_symbols(np.full(top - s, K28_5, np.uint8), 1, rd_end)
        out.append(
            LaneStream(
                lane.lane_id,
                np.concatenate((pre, lane.symbols, post)),
                np.concatenate((np.ones(s, bool), lane.is_control, np.ones(top - s, bool))),
                lane.start_tick,
            )
        )
    return out


class _LaneRx:
    def __init__(self, params, lane_index):
        self.p = params
        self.index = lane_index
        self.state = "cgs"
        self.rd = -1
        self.comma_run = 0
        self.locked = False
        self.pending = np.empty(0, np.uint16)
        self.pending_tick = None
        self.ila_tick = None
        self.ila_valid = False
        self.fifo = np.empty(0, np.uint8)
        self.descr = 0
        self.symbol_errors = 0
        self.disparity_errors = 0
        self.resync_events = 0
        self._err_ticks = deque()

    def _note_errors(self, ticks):
        # loss of lock: lock_loss_count bad symbols inside lock_loss_window ticks
        for t in ticks:
            self._err_ticks.append(int(t))
            while self._err_ticks and self._err_ticks[0] <= t - self.p.lock_loss_window:
                self._err_ticks.popleft()
            if len(self._err_ticks) >= self.p.lock_loss_count:
                self.resync_events += 1
                self._err_ticks.clear()

    def feed(self, symbols, tick):
        if self.pending.size == 0:
            self.pending_tick = tick
        self.pending = np.concatenate((self.pending, symbols))
        while self.pending.size:
            before = (self.state, self.pending.size)
            if self.state == "cgs":
                self._cgs()
            elif self.state == "ila":
                self._ila()
            else:
                self._data()
            if (self.state, self.pending.size) == before:
                break

    def _consume(self, n):
        self.pending = self.pending[n:]
        self.pending_tick += n

    def _cgs(self):
        syms = self.pending
        octets, is_k, err, rd = kernels.decode_symbols(syms, self.rd)
        comma = is_k & (octets == K28_5) & (err == 0)
        for i in range(syms.size):
            if comma[i]:
                self.comma_run += 1
                if self.comma_run >= self.p.lock_threshold:
                    self.locked = True
                continue
            if self.locked and is_k[i] and octets[i] == K28_0 and err[i] == 0:
                self.rd = kernels.decode_symbols(syms[:i], self.rd)[3]
                self._consume(i)
                self.state = "ila"
                self.ila_tick = self.pending_tick
                return
            if self.locked:
                self.resync_events += 1
                self.locked = False
            self.comma_run = 0
        self.rd = rd
        self._consume(syms.size)

    def _ila(self):
        p = self.p
        need = ILA_MULTIFRAMES * p.octets_per_multiframe
        if self.pending.size < need:
            return
        octets, is_k, err, self.rd = kernels.decode_symbols(self.pending[:need], self.rd)
        self.symbol_errors += int((err == kernels.ERR_SYMBOL).sum())
        self.disparity_errors += int((err == kernels.ERR_DISPARITY).sum())
        mf = p.octets_per_multiframe
        ok = not err.any()
        for m in range(ILA_MULTIFRAMES):
            ok &= bool(is_k[m * mf]) and octets[m * mf] == K28_0
            ok &= bool(is_k[m * mf + mf - 1]) and octets[m * mf + mf - 1] == K28_3
        ok &= bool(is_k[mf + 1]) and octets[mf + 1] == K28_4
        if not ok:
            raise LinkAlignmentError(f"lane {self.index}: malformed ILA sequence")
        cfg = IlaConfig.from_octets(octets[mf + 2 : mf + 8])
        problems = []
        if not cfg.checksum_ok:
            problems.append("checksum")
        if cfg.F != p.F:
            problems.append(f"F={cfg.F} (expected {p.F})")
        if cfg.K != p.K:
            problems.append(f"K={cfg.K} (expected {p.K})")
        if cfg.scrambling != p.scrambling:
            problems.append(f"scrambling={cfg.scrambling}")
        if cfg.lane_id != self.index:
            problems.append(f"lane_id={cfg.lane_id} (expected {self.index})")
        if cfg.device_id != (p.device_id & 0xFF):
            problems.append(f"device_id={cfg.device_id}")
        if problems:
            raise LinkConfigError(f"lane {self.index}: ILA mismatch: " + ", ".join(problems))
        self.ila_valid = True
        self._consume(need)
        self.state = "data"

    def _data(self):
        syms = self.pending
        octets, is_k, err, rd = kernels.decode_symbols(syms, self.rd)
        stop = syms.size
        comma = np.flatnonzero(is_k & (octets == K28_5))
        if comma.size:
            # transmitter went back to CGS: end of this data phase
            stop = int(comma[0])
            rd = kernels.decode_symbols(syms[:stop], self.rd)[3]
        bad = (err[:stop] != 0) | is_k[:stop]
        self.symbol_errors += int(((err[:stop] == kernels.ERR_SYMBOL) | ((err[:stop] == 0) & is_k[:stop])).sum())
        self.disparity_errors += int((err[:stop] == kernels.ERR_DISPARITY).sum())
        if bad.any():
            self._note_errors(self.pending_tick + np.flatnonzero(bad))
        data = octets[:stop]
        if self.p.scrambling:
            data, self.descr = kernels.descramble(data, self.descr)
        self.fifo = np.concatenate((self.fifo, data))
        self.rd = rd
        self._consume(stop)
        if stop < syms.size:
            self.state = "cgs"
            self.locked = False
            self.comma_run = 0


class LinkReceiver:
    """Receiver for one link. Drive it with :meth:`step`, one equal-length
    symbol chunk per lane per call, then :meth:`finish`."""

    def __init__(self, params, sysref_phase=0):
        self.params = params
        self.sysref_phase = int(sysref_phase)
        self.lanes = [_LaneRx(params, i) for i in range(params.lanes)]
        self.tick = None
        self.start_tick = None
        self.released = 0
        self._t_ila = None

    @property
    def data_start_tick(self):
        return self._t_ila + ILA_MULTIFRAMES * self.params.octets_per_multiframe

    def step(self, chunks):
        p = self.params
        if len(chunks) != p.lanes:
            raise ValueError(f"expected {p.lanes} lane chunks")
        syms = [c.symbols if isinstance(c, LaneStream) else np.asarray(c, np.uint16) for c in chunks]
        if len({s.size for s in syms}) > 1:
            raise LinkAlignmentError("lanes must advance in lockstep")
        if self.tick is None:
            starts = {c.start_tick for c in chunks if isinstance(c, LaneStream)}
            if len(starts) > 1:
                raise LinkAlignmentError("lanes disagree on the stream start tick")
            self.start_tick = self.tick = starts.pop() if starts else 0
            self._t_ila = self.start_tick + p.cgs_frames * p.F
            if self._t_ila % p.F or (self._t_ila // p.F - self.sysref_phase) % p.K:
                raise LinkAlignmentError("ILA start does not fall on a receiver LMFC boundary")
        for lane, s in zip(self.lanes, syms):
            lane.feed(s, self.tick)
            self._check_skew(lane)
        self.tick += syms[0].size
        return self._release(final=False)

    def _check_skew(self, lane):
        if lane.ila_tick is None:
            return
        skew = lane.ila_tick - self._t_ila
        if skew < 0 or skew > self.params.elastic_depth:
            raise LinkAlignmentError(
                f"lane {lane.index}: skew {skew} octets outside elastic buffer (depth {self.params.elastic_depth})"
            )

    def _release(self, final):
        p = self.params
        if any(l.ila_tick is None for l in self.lanes):
            if final:
                return []
            late = self.tick - self._t_ila
            if late > p.elastic_depth:
                missing = [l.index for l in self.lanes if l.ila_tick is None]
                raise LinkAlignmentError(f"lanes {missing}: ILA not seen within elastic depth")
            return []
        avail = min(l.fifo.size for l in self.lanes) // p.F
        if not final:
            due = (self.tick - self.data_start_tick - p.release_offset) // p.F
            avail = min(avail, max(due - self.released, 0))
        if avail <= 0:
            return []
        parts = []
        for l in self.lanes:
            take = avail * p.F
            parts.append(l.fifo[:take].reshape(avail, p.F))
            l.fifo = l.fifo[take:]
        frames = np.hstack(parts)
        start = self.data_start_tick // p.F + self.released
        self.released += avail
        return [SampleBlock(_octets_to_frames(frames, p.channels), start, p.frame_clock)]

    def finish(self):
        return self._release(final=True)

    @property
    def status(self):
        p = self.params
        ready = all(l.ila_tick is not None for l in self.lanes)
        return LinkStatus(
            lanes=p.lanes,
            cgs_locked=[l.ila_tick is not None or l.locked for l in self.lanes],
            ila_valid=[l.ila_valid for l in self.lanes],
            lane_skew=[None if l.ila_tick is None else l.ila_tick - self._t_ila for l in self.lanes],
            symbol_errors=[l.symbol_errors for l in self.lanes],
            disparity_errors=[l.disparity_errors for l in self.lanes],
            resync_events=[l.resync_events for l in self.lanes],
            latency_octets=p.release_offset if ready else None,
            latency_frames=p.release_offset // p.F if ready else None,
            data_start_index=self.data_start_tick // p.F if ready else None,
            frames_released=self.released,
        )


def rx_link(lanes, params, sysref_phase=0, chunk=None):
    """Receive complete lane captures. Returns ``(blocks, LinkStatus)``.

    ``chunk`` feeds the receiver that many symbols per lane per step.
    """
    n = {len(l) for l in lanes}
    if len(n) != 1:
        raise LinkAlignmentError("lane captures differ in length; apply_skew keeps them equal")
    n = n.pop()
    rx = LinkReceiver(params, sysref_phase)
    step = n if not chunk else int(chunk)
    blocks = []
    for lo in range(0, max(n, 1), step):
        parts = [
            LaneStream(l.lane_id, l.symbols[lo : lo + step], l.is_control[lo : lo + step], l.start_tick + lo)
            for l in lanes
        ]
        blocks += rx.step(parts)
    blocks += rx.finish()
    return blocks, rx.status


def align_links(streams):
    """Coalesce several links' outputs into one block of stacked channels,
    trimmed to the sample range every link covers."""
    joined = [concat_blocks(s) if not isinstance(s, SampleBlock) else s for s in streams]
    start = max(b.start_index for b in joined)
    end = min(b.end_index for b in joined)
    if end <= start:
        raise LinkAlignmentError("links share no common sample range")
    parts = [b.slice(start, end) for b in joined]
    return SampleBlock(np.vstack([b.data for b in parts]), start, joined[0].sample_rate)
