"""Packet format and packet-trace capture files.

Every packet is a 20-byte big-endian header followed by the payload::

    u8  opcode
    u8  flags          FIRST=1, LAST=2, RETRY=4
    u16 qp_id          destination queue pair
    u32 psn            24-bit packet sequence number (upper byte zero)
    u32 rkey           WRITE: remote key; ACK/NAK: 0
    u32 remote_offset  WRITE: byte offset of this segment inside the region
    u32 length         WRITE/SEND: total length of the work request;
                       CM: payload length

The payload size is the datagram size minus the header. ACK carries the last
in-order PSN, NAK the PSN the responder expects next, NAK_ACCESS the PSN of
the rejected request's first segment.
"""

import enum
import struct
from dataclasses import dataclass

import numpy as np

HEADER = struct.Struct("!BBHIIII")
HEADER_SIZE = HEADER.size
PSN_BITS = 24
PSN_MOD = 1 << PSN_BITS
PSN_MASK = PSN_MOD - 1

FLAG_FIRST = 1
FLAG_LAST = 2
FLAG_RETRY = 4


class Op(enum.IntEnum):
    WRITE = 1
    SEND = 2
    ACK = 3
    NAK = 4
    NAK_ACCESS = 5
    CM_REQ = 16
    CM_REP = 17
    CM_RTU = 18


class WireError(ValueError):
    pass


@dataclass
class Packet:
    opcode: int
    qp_id: int
    psn: int = 0
    flags: int = 0
    rkey: int = 0
    remote_offset: int = 0
    length: int = 0
    payload: bytes = b""

    def encode(self):
        if not 0 <= self.psn < PSN_MOD:
            raise WireError(f"psn {self.psn} exceeds 24 bits")
        hdr = HEADER.pack(self.opcode, self.flags, self.qp_id, self.psn, self.rkey, self.remote_offset, self.length)
        return hdr + bytes(self.payload) if self.payload else hdr

    @classmethod
    def decode(cls, raw):
        if len(raw) < HEADER_SIZE:
            raise WireError("datagram shorter than header")
        op, flags, qp, psn, rkey, off, length = HEADER.unpack_from(raw)
        if psn >= PSN_MOD:
            raise WireError("psn upper byte must be zero")
        try:
            op = Op(op)
        except ValueError:
            raise WireError(f"unknown opcode {op}") from None
        return cls(op, qp, psn, flags, rkey, off, length, memoryview(raw)[HEADER_SIZE:])


def psn_add(psn, n):
    return (psn + n) & PSN_MASK


def psn_diff(a, b):
    """Signed distance ``a - b`` on the 24-bit circle, in [-2^23, 2^23)."""
    d = (a - b) & PSN_MASK
    return d - PSN_MOD if d >= PSN_MOD // 2 else d


# ------------------------------------------------------------------ traces
#
# Trace file: magic b"RTRC", u16 version=1, u16 reserved, then records of
#   f64 time (s), u8 event (0 sent, 1 delivered, 2 dropped), u8 src, u8 dst,
#   u8 reserved, u32 byte count, datagram bytes
# all little-endian.

TRACE_MAGIC = b"RTRC"
_TRACE_HDR = struct.Struct("<4sHH")
_TRACE_REC = struct.Struct("<dBBBBI")
TRACE_SENT, TRACE_DELIVERED, TRACE_DROPPED = 0, 1, 2


@dataclass
class TraceRecord:
    time: float
    event: int
    src: int
    dst: int
    data: bytes

    @property
    def packet(self):
        return Packet.decode(self.data)


def write_trace(path, records):
    with open(path, "wb") as fh:
        fh.write(_TRACE_HDR.pack(TRACE_MAGIC, 1, 0))
        for r in records:
            fh.write(_TRACE_REC.pack(r.time, r.event, r.src, r.dst, 0, len(r.data)))
            fh.write(bytes(r.data))


def read_trace(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, _ = _TRACE_HDR.unpack_from(raw)
    if magic != TRACE_MAGIC or version != 1:
        raise WireError("not a packet trace")
    pos = _TRACE_HDR.size
    out = []
    while pos < len(raw):
        t, ev, src, dst, _, n = _TRACE_REC.unpack_from(raw, pos)
        pos += _TRACE_REC.size
        out.append(TraceRecord(t, ev, src, dst, raw[pos : pos + n]))
        pos += n
    return out


def as_bytes_view(data):
    """Flat read-only ``uint8`` view of any buffer-like object."""
    if isinstance(data, np.ndarray):
        return np.ascontiguousarray(data).view(np.uint8).ravel()
    return np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
