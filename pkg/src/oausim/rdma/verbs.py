"""Verbs-level objects: queue pairs, memory regions, work requests, completions."""

import enum
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .wire import PSN_MASK, as_bytes_view


class RdmaError(RuntimeError):
    pass


class QpStateError(RdmaError):
    """Operation not allowed in the queue pair's current state."""


class CmError(RdmaError):
    """Connection-manager handshake failed."""


class QpState(enum.Enum):
    RESET = "reset"
    INIT = "init"
    READY = "ready"
    ERROR = "error"


class QpKind(enum.Enum):
    UD = "unreliable_datagram"
    RC = "reliable_connection"


class WcStatus(enum.Enum):
    SUCCESS = "success"
    REMOTE_ACCESS_ERROR = "remote_access_error"
    RETRY_EXCEEDED = "retry_exceeded"
    # requests still queued when the QP entered the error state
    FLUSHED = "flushed"


_TRANSITIONS = {
    QpState.RESET: {QpState.INIT},
    QpState.INIT: {QpState.READY},
    QpState.READY: set(),
    QpState.ERROR: {QpState.RESET},
}

_MR_INFO = struct.Struct("!2sQQI")


@dataclass
class MemoryRegion:
    base: int
    length: int
    rkey: int
    buffer: np.ndarray = field(default=None, repr=False)

    def contains(self, offset, length):
        return 0 <= offset and length >= 0 and offset + length <= self.length

    def describe(self):
        """Wire form used to advertise the region to the peer."""
        return _MR_INFO.pack(b"MR", self.base, self.length, self.rkey)

    @classmethod
    def from_description(cls, raw):
        tag, base, length, rkey = _MR_INFO.unpack(bytes(raw[: _MR_INFO.size]))
        if tag != b"MR":
            raise RdmaError("message is not a memory-region advertisement")
        return cls(base, length, rkey)


@dataclass
class WorkRequest:
    wr_id: int
    opcode: str
    data: object
    remote_offset: int = 0
    rkey: int = None

    def __post_init__(self):
        if self.opcode not in ("WRITE", "SEND"):
            raise ValueError(f"unsupported opcode {self.opcode!r}")
        self.data = as_bytes_view(self.data)
        if self.data.size == 0:
            raise ValueError("work request length must be > 0")
        if self.remote_offset < 0:
            raise ValueError("remote_offset must be >= 0")

    @property
    def length(self):
        return int(self.data.size)

    @classmethod
    def from_block(cls, wr_id, ring, slot, remote_offset, rkey=None):
        """WRITE sourcing one ring-buffer block (copied at post time)."""
        return cls(wr_id, "WRITE", ring.block_view(slot).copy(), remote_offset, rkey)


@dataclass(frozen=True)
class Completion:
    wr_id: int
    status: WcStatus
    opcode: str
    byte_len: int
    qp_id: int


class QueuePair:
    """Queue pair state plus the handoff queues shared with the application.

    ``post`` and ``poll_cq`` may be called from a thread other than the one
    running the engine; both go through a lock.
    """

    def __init__(self, qp_id, kind, sq_depth=1024):
        self.qp_id = qp_id
        self.kind = kind
        self.state = QpState.RESET
        self.sq_depth = sq_depth
        self.send_psn = 0
        self.expected_psn = 0
        self.sq = deque()
        self.cq = deque()
        self.recv_queue = deque()
        self.remote_addr = None
        self.remote_qp = None
        self.remote_mr = None
        self.outstanding = 0  # posted and not yet completed
        self.lock = threading.Lock()

    def modify(self, state):
        if state is QpState.ERROR or state in _TRANSITIONS[self.state]:
            self.state = state
        else:
            raise QpStateError(f"QP {self.qp_id}: {self.state.value} -> {state.value} not allowed")

    def set_initial_psns(self, send_psn, expected_psn):
        self.send_psn = send_psn & PSN_MASK
        self.expected_psn = expected_psn & PSN_MASK

    def post(self, wrs):
        """Enqueue in order; returns how many were accepted (SQ backpressure)."""
        if self.state is not QpState.READY:
            raise QpStateError(f"QP {self.qp_id} is {self.state.value}, not ready")
        wrs = list(wrs)
        if not wrs:
            raise ValueError("batch must contain at least one work request")
        for wr in wrs:
            if wr.opcode == "WRITE" and wr.rkey is None:
                if self.remote_mr is None:
                    raise ValueError("WRITE needs an rkey or an advertised remote region")
                wr.rkey = self.remote_mr.rkey
        with self.lock:
            room = self.sq_depth - self.outstanding
            take = wrs[: max(room, 0)]
            self.sq.extend(take)
            self.outstanding += len(take)
        return len(take)

    def poll_cq(self, max_entries=None):
        with self.lock:
            n = len(self.cq) if max_entries is None else min(max_entries, len(self.cq))
            return [self.cq.popleft() for _ in range(n)]

    def _complete(self, wr, status):
        with self.lock:
            self.cq.append(Completion(wr.wr_id, status, wr.opcode, wr.length, self.qp_id))
            self.outstanding -= 1

    def _take_wr(self):
        with self.lock:
            return self.sq.popleft() if self.sq else None


def post_batch(qp, wrs):
    return qp.post(wrs)


def poll_cq(qp, max_entries=None):
    return qp.poll_cq(max_entries)
