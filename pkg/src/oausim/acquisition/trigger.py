"""Trigger latching and frame windowing."""

import math
import queue
import threading
from dataclasses import dataclass

import numpy as np

from ..samples import SampleBlock


class TriggerBusy(RuntimeError):
    """A trigger arrived while the previous frame window was still open."""


@dataclass(frozen=True)
class TriggerConfig:
    source: str = "internal_pulser"
    delay: int = 60
    window: int = 3072

    def __post_init__(self):
        if self.source not in ("external", "internal_pulser"):
            raise ValueError(f"unknown trigger source {self.source!r}")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if self.window <= 0:
            raise ValueError("window must be > 0")


@dataclass(frozen=True)
class FrameEvent:
    frame_id: int
    trigger_sample_index: int
    first_block_index: int
    block_count: int


def latch_trigger(event_time, sample_clock):
    """Index of the first sample-clock edge at or after ``event_time``.

    Edges are at ``k / sample_clock``. The returned edge satisfies
    ``0 <= k / sample_clock - event_time < 1 / sample_clock``.
    """
    if sample_clock <= 0:
        raise ValueError("sample_clock must be positive")
    k = math.ceil(event_time * sample_clock)
    # guard the float product against landing one edge off
    while (k - 1) / sample_clock >= event_time:
        k -= 1
    while k / sample_clock < event_time:
        k += 1
    return k


def latch_triggers(event_times, sample_clock):
    """Vectorised :func:`latch_trigger`."""
    if sample_clock <= 0:
        raise ValueError("sample_clock must be positive")
    t = np.asarray(event_times, dtype=np.float64)
    k = np.ceil(t * sample_clock)
    k = np.where((k - 1) / sample_clock >= t, k - 1, k)
    k = np.where(k / sample_clock < t, k + 1, k)
    return k.astype(np.int64)


def block_count(window, channels, bits_per_sample, block_size):
    return -(-(window * channels * bits_per_sample) // (8 * block_size))


class EventBus:
    """Ordered fan-out of notifications to any number of observers."""

    def __init__(self):
        self._subs = []
        self._lock = threading.Lock()

    def subscribe(self, maxsize=0):
        q = queue.Queue(maxsize)
        with self._lock:
            self._subs.append(q)
        return q

    def publish(self, item):
        with self._lock:
            subs = list(self._subs)
        for q in subs:
            q.put(item)


class FrameWindower:
    """Cuts trigger-aligned frames out of a continuous sample stream.

    Call :meth:`trigger` with latched sample indices and :meth:`push` with the
    stream. A frame is returned once all its samples have been seen; the
    :class:`FrameEvent` is published as soon as its first sample is forwarded.
    Triggers landing inside an open window are rejected (:class:`TriggerBusy`).
    """

    def __init__(self, cfg, channels, bits_per_sample=16, block_size=256 * 1024, bus=None):
        self.cfg = cfg
        self.channels = channels
        self.bits = bits_per_sample
        self.block_size = block_size
        self.bus = bus or EventBus()
        self.busy_rejections = 0
        self._pending = []  # [trigger_index, event, parts]
        self._busy_until = None
        self._frame_id = 0
        self._next_block = 0
        self._stream_pos = None

    @property
    def blocks_per_frame(self):
        return block_count(self.cfg.window, self.channels, self.bits, self.block_size)

    def trigger(self, trigger_index):
        start = trigger_index + self.cfg.delay
        if self._busy_until is not None and start < self._busy_until:
            self.busy_rejections += 1
            raise TriggerBusy(f"trigger at {trigger_index} while window open until {self._busy_until}")
        if self._stream_pos is not None and start < self._stream_pos:
            raise ValueError("trigger refers to samples already streamed past")
        self._busy_until = start + self.cfg.window
        ev = FrameEvent(self._frame_id, int(trigger_index), self._next_block, self.blocks_per_frame)
        self._frame_id += 1
        self._next_block += ev.block_count
        self._pending.append([start, ev, [], False])
        return ev

    def push(self, block):
        """Feed stream samples; returns the list of ``(frame, event)`` completed."""
        if self._stream_pos is not None and block.start_index != self._stream_pos:
            raise ValueError("windower input must be continuous")
        self._stream_pos = block.end_index
        done = []
        for entry in self._pending:
            start, ev, parts, announced = entry
            piece = block.slice(start, start + self.cfg.window)
            if piece.n:
                if not parts and piece.start_index != start:
                    raise ValueError(f"stream starts after frame start {start}")
                if not announced:
                    self.bus.publish(ev)
                    entry[3] = True
                parts.append(piece.data)
            got = sum(p.shape[1] for p in parts)
            if got == self.cfg.window:
                frame = SampleBlock(np.concatenate(parts, axis=1), start, block.sample_rate)
                done.append((frame, ev))
        self._pending = [e for e in self._pending if sum(p.shape[1] for p in e[2]) < self.cfg.window]
        return done


def window_frame(stream, cfg, trigger_index, bits_per_sample=16, block_size=256 * 1024):
    """One-shot windowing over a finished stream. Returns ``(frame, event)``."""
    if isinstance(stream, SampleBlock):
        stream = [stream]
    stream = list(stream)
    win = FrameWindower(cfg, stream[0].channels, bits_per_sample, block_size)
    win.trigger(trigger_index)
    for b in stream:
        done = win.push(b)
        if done:
            return done[0]
    raise ValueError("stream does not cover the requested window")
