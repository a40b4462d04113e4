"""Block-granular circular buffer shared by one writer and one reader."""

import threading
import zlib
from dataclasses import dataclass

import numpy as np

FREE = 0
FILLED = 1


class RingOverflow(RuntimeError):
    """Writer reached a block that has not been read yet."""


class RingSequenceError(RuntimeError):
    """Read of a block that is not filled (never written or already read)."""


@dataclass
class TraceEntry:
    op: str
    slot: int
    seq: int
    crc: int


class RingBuffer:
    """``capacity`` bytes split into ``capacity // block_size`` slots.

    The writer fills slots in order; each read releases one slot, in any
    order. A write into an unread slot raises :class:`RingOverflow` and leaves
    the buffer untouched. Publication of a filled slot happens under the lock
    after the payload copy, so a reader that sees ``FILLED`` sees the bytes.
    """

    def __init__(self, capacity=4 * 1024 * 1024, block_size=256 * 1024, trace=False):
        if block_size <= 0 or capacity <= 0:
            raise ValueError("capacity and block_size must be positive")
        if capacity % block_size:
            raise ValueError("capacity must be a multiple of block_size")
        self.capacity = capacity
        self.block_size = block_size
        self.slots = capacity // block_size
        self.mem = np.zeros(capacity, dtype=np.uint8)
        self._state = np.full(self.slots, FREE, dtype=np.uint8)
        self._seq = np.full(self.slots, -1, dtype=np.int64)
        self.write_cursor = 0
        self.read_cursor = 0
        self.writes = 0
        self.reads = 0
        self.overflows = 0
        self._cond = threading.Condition()
        self.trace = [] if trace else None

    @property
    def occupied(self):
        with self._cond:
            return int((self._state == FILLED).sum())

    def block_view(self, slot):
        return self.mem[slot * self.block_size : (slot + 1) * self.block_size]

    def write(self, payload):
        """Store one block at the write cursor; returns its slot index."""
        payload = np.frombuffer(memoryview(payload), dtype=np.uint8) if not isinstance(payload, np.ndarray) else payload
        if payload.size != self.block_size:
            raise ValueError(f"payload must be exactly {self.block_size} bytes")
        with self._cond:
            slot = self.write_cursor
            if self._state[slot] != FREE:
                self.overflows += 1
                raise RingOverflow(f"slot {slot} still holds unread data")
        # single writer: nobody else touches a FREE slot
        self.block_view(slot)[:] = payload.view(np.uint8).ravel()
        with self._cond:
            self._state[slot] = FILLED
            self._seq[slot] = self.writes
            self.writes += 1
            self.write_cursor = (slot + 1) % self.slots
            if self.trace is not None:
                self.trace.append(TraceEntry("w", slot, self.writes - 1, zlib.crc32(self.block_view(slot))))
            self._cond.notify_all()
        return slot

    def _check_filled(self, slot):
        if not 0 <= slot < self.slots:
            raise RingSequenceError(f"slot {slot} out of range")
        with self._cond:
            if self._state[slot] != FILLED:
                raise RingSequenceError(f"slot {slot} is not filled")

    def read(self, slot, out=None):
        """Copy out a filled block and release its slot."""
        self._check_filled(slot)
        if out is None:
            data = self.block_view(slot).copy()
        else:
            np.copyto(out, self.block_view(slot))
            data = out
        self._free(slot, data)
        return data

    def release(self, slot):
        """Release a filled block consumed in place (e.g. by a zero-copy DMA)."""
        self._check_filled(slot)
        self._free(slot, self.block_view(slot))

    def _free(self, slot, data):
        with self._cond:
            self._state[slot] = FREE
            seq = int(self._seq[slot])
            self.reads += 1
            self.read_cursor = (slot + 1) % self.slots
            if self.trace is not None:
                self.trace.append(TraceEntry("r", slot, seq, zlib.crc32(data)))
            self._cond.notify_all()

    def is_filled(self, slot):
        with self._cond:
            return bool(self._state[slot] == FILLED)

    def wait_filled(self, slot, timeout=None):
        with self._cond:
            return self._cond.wait_for(lambda: self._state[slot] == FILLED, timeout)

    def wait_free(self, slot, timeout=None):
        with self._cond:
            return self._cond.wait_for(lambda: self._state[slot] == FREE, timeout)

    def dump_trace(self, path):
        """CSV: op,slot,seq,crc32."""
        with open(path, "w") as fh:
            fh.write("op,slot,seq,crc32\n")
            for e in self.trace or ():
                fh.write(f"{e.op},{e.slot},{e.seq},{e.crc:08x}\n")


def ring_write(buf, payload):
    return buf.write(payload)


def ring_read(buf, slot):
    return buf.read(slot)


class BlockGenerator:
    """Packs frames into ring-buffer blocks.

    Frame bytes are sample-major (all channels of sample 0, then sample 1 ...)
    little-endian int16, zero-padded to a whole number of blocks. On overflow
    the rest of the frame is dropped and counted; committed blocks stay intact.
    """

    def __init__(self, ring, bus=None):
        self.ring = ring
        self.bus = bus
        self.frames_written = 0
        self.frames_dropped = 0

    @staticmethod
    def frame_bytes(frame_data):
        return np.ascontiguousarray(frame_data.T).astype("<i2").view(np.uint8).ravel()

    def write_frame(self, frame_data, event=None, wait=None):
        """Returns the list of slots written. Raises :class:`RingOverflow`.

        With ``wait`` (seconds) each block first waits that long for its slot
        to be released, which turns the ring into a backpressure point.
        """
        raw = self.frame_bytes(frame_data)
        bs = self.ring.block_size
        nblk = -(-raw.size // bs)
        padded = np.zeros(nblk * bs, dtype=np.uint8)
        padded[: raw.size] = raw
        slots = []
        try:
            for i in range(nblk):
                if wait is not None:
                    self.ring.wait_free(self.ring.write_cursor, wait)
                slot = self.ring.write(padded[i * bs : (i + 1) * bs])
                slots.append(slot)
                if self.bus is not None:
                    self.bus.publish(("block", event, i, slot))
        except Exception:
            self.frames_dropped += 1
            raise
        self.frames_written += 1
        return slots
