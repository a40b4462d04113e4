"""Lane capture files.

Layout (all integers little-endian)::

    offset size  field
    0      4     magic b"LCAP"
    4      2     version (1)
    6      2     lanes L
    8      2     octets per frame F
    10     2     frames per multiframe K
    12     1     scrambling flag
    13     1     reserved (0)
    14     2     device id
    16     4     elastic depth (octets)
    20     4     CGS length (frames)
    24     8     frame clock, float64 Hz
    32     8     start tick, int64
    40     8     symbols per lane N, uint64
    48     ...   L lane records: uint16 lane id, then ceil(10*N/8) bytes of
                 10-bit symbols packed MSB first (bit a of symbol 0 is the MSB
                 of the first byte), zero padded to a byte boundary

Control/data annotations are not stored; decoding the symbols recovers them.
"""

import struct

import numpy as np

from .codec import DEC_VALUE, bits_to_symbols, symbol_bits
from .link import LaneStream, LinkParams

MAGIC = b"LCAP"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHBBHIIdqQ")


def pack_symbols(symbols):
    return np.packbits(symbol_bits(symbols)).tobytes()


def unpack_symbols(raw, count):
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[: count * 10]
    return bits_to_symbols(bits)


def write_capture(path, lanes, params):
    n = {len(l) for l in lanes}
    if len(n) != 1:
        raise ValueError("all lanes must hold the same number of symbols")
    n = n.pop()
    header = _HEADER.pack(
        MAGIC, VERSION, len(lanes), params.F, params.K, int(params.scrambling), 0,
        params.device_id, params.elastic_depth, params.cgs_frames, float(params.frame_clock),
        int(lanes[0].start_tick), n,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for lane in lanes:
            fh.write(struct.pack("<H", lane.lane_id))
            fh.write(pack_symbols(lane.symbols))


def read_capture(path):
    """Returns ``(LinkParams, [LaneStream, ...])``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated lane capture")
    magic, version, L, F, K, scr, _, did, depth, cgs, fclk, start, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError("not a lane capture file")
    if version != VERSION:
        raise ValueError(f"unsupported capture version {version}")
    params = LinkParams(
        lanes=L, octets_per_frame=F, frames_per_multiframe=K, scrambling=bool(scr),
        elastic_depth=depth, frame_clock=fclk, device_id=did, cgs_frames=cgs,
    )
    body = (10 * n + 7) // 8
    pos = _HEADER.size
    lanes = []
    for _ in range(L):
        if pos + 2 + body > len(raw):
            raise ValueError("truncated lane capture")
        (lane_id,) = struct.unpack_from("<H", raw, pos)
        syms = unpack_symbols(raw[pos + 2 : pos + 2 + body], n)
        value = DEC_VALUE[syms]
        lanes.append(LaneStream(lane_id, syms, (value >= 0) & ((value >> 8) == 1), start))
        pos += 2 + body
    return params, lanes
