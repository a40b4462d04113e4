"""Stream kernels for the link layer: 8b/10b over arrays and the
1 + x^14 + x^15 self-synchronous scrambler.

Each kernel exists as a numba loop (``*_nb``) and a vectorised numpy version
(``*_np``). The public names dispatch on :data:`oausim._accel.USE_NUMBA`.
"""

import numpy as np

from .._accel import USE_NUMBA, njit
from .codec import DEC_VALID, DEC_VALUE, ENC_TABLE, FLIP_TABLE, NEXT_RD

ERR_NONE = 0
ERR_SYMBOL = 1
ERR_DISPARITY = 2

_STATE_MASK = 0x7FFF


def _rd_idx(rd):
    return 0 if rd < 0 else 1


# --------------------------------------------------------------------- 8b/10b


@njit
def _encode_loop(octets, is_k, rd_idx, enc, nxt):
    n = octets.shape[0]
    out = np.empty(n, dtype=np.uint16)
    bad = -1
    for i in range(n):
        sym = enc[rd_idx, is_k[i], octets[i]]
        if sym < 0:
            bad = i
            break
        out[i] = sym
        rd_idx = 0 if nxt[rd_idx, sym] < 0 else 1
    return out, rd_idx, bad


def encode_symbols_nb(octets, is_k, rd=-1):
    """Encode ``octets`` (with per-octet control flags) starting at ``rd``.

    Returns ``(symbols, final_rd)``. Raises ``ValueError`` on an unsupported
    control octet.
    """
    octets = np.ascontiguousarray(octets, dtype=np.uint8)
    is_k = _flags(is_k, octets.size)
    out, ri, bad = _encode_loop(octets, is_k, _rd_idx(rd), ENC_TABLE, NEXT_RD)
    if bad >= 0:
        raise ValueError(f"unsupported control octet 0x{int(octets[bad]):02X} at {bad}")
    return out, (-1 if ri == 0 else 1)


def encode_symbols_np(octets, is_k, rd=-1):
    octets = np.ascontiguousarray(octets, dtype=np.uint8)
    is_k = _flags(is_k, octets.size)
    if octets.size == 0:
        return np.empty(0, dtype=np.uint16), rd
    codes = ENC_TABLE[:, is_k, octets]
    bad = np.flatnonzero(codes[0] < 0)
    if bad.size:
        raise ValueError(f"unsupported control octet 0x{int(octets[bad[0]]):02X} at {bad[0]}")
    flips = FLIP_TABLE[is_k, octets].astype(np.int64)
    parity = np.concatenate(([0], np.cumsum(flips)[:-1])) & 1
    ri = _rd_idx(rd) ^ parity
    out = codes[ri, np.arange(octets.size)].astype(np.uint16)
    final = _rd_idx(rd) ^ (int(flips.sum()) & 1)
    return out, (-1 if final == 0 else 1)


@njit
def _decode_loop(symbols, rd_idx, dec_value, dec_valid, nxt):
    n = symbols.shape[0]
    octets = np.zeros(n, dtype=np.uint8)
    is_k = np.zeros(n, dtype=np.uint8)
    err = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        sym = symbols[i]
        v = dec_value[sym]
        if v < 0:
            err[i] = 1
            continue
        octets[i] = v & 0xFF
        is_k[i] = v >> 8
        if dec_valid[rd_idx, sym]:
            rd_idx = 0 if nxt[rd_idx, sym] < 0 else 1
        else:
            err[i] = 2
            rd_idx = 0 if nxt[1 - rd_idx, sym] < 0 else 1
    return octets, is_k, err, rd_idx


def decode_symbols_nb(symbols, rd=-1):
    """Decode a symbol array. Returns ``(octets, is_k, errors, final_rd)``.

    ``errors`` holds ``ERR_SYMBOL`` for invalid code groups (decoded as 0,
    disparity unchanged) and ``ERR_DISPARITY`` where the group is legal only
    under the opposite disparity (the decoder resynchronises to it).
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.uint16)
    if symbols.size and int(symbols.max()) > 1023:
        raise ValueError("symbols must be 10-bit values")
    o, k, e, ri = _decode_loop(symbols, _rd_idx(rd), DEC_VALUE, DEC_VALID, NEXT_RD)
    return o, k.astype(bool), e, (-1 if ri == 0 else 1)


def decode_symbols_np(symbols, rd=-1):
    symbols = np.ascontiguousarray(symbols, dtype=np.uint16)
    n = symbols.size
    if n and int(symbols.max()) > 1023:
        raise ValueError("symbols must be 10-bit values")
    value = DEC_VALUE[symbols].astype(np.int32)
    invalid = value < 0
    value = np.where(invalid, 0, value)
    octets = (value & 0xFF).astype(np.uint8)
    is_k = (value >> 8).astype(bool)

    ok_minus = DEC_VALID[0, symbols]
    ok_plus = DEC_VALID[1, symbols]
    # A group legal under only one disparity pins the disparity after it,
    # whatever the decoder believed before. Between such anchors the
    # disparity just toggles on unbalanced groups.
    forced = ok_minus ^ ok_plus
    anchor_rd = np.where(ok_minus, NEXT_RD[0, symbols], NEXT_RD[1, symbols]).astype(np.int8)
    flips = np.where(invalid, 0, FLIP_TABLE[is_k.astype(np.intp), octets]).astype(np.int64)

    idx = np.arange(n)
    last_anchor = np.maximum.accumulate(np.where(forced, idx, -1)) if n else idx
    # anchor strictly before position i
    prev_anchor = np.concatenate(([-1], last_anchor[:-1])) if n else idx
    cum = np.concatenate(([0], np.cumsum(flips)))
    base_idx = np.where(prev_anchor >= 0, anchor_rd[np.maximum(prev_anchor, 0)] > 0, _rd_idx(rd)).astype(np.int64)
    start = np.where(prev_anchor >= 0, prev_anchor + 1, 0)
    rd_before = base_idx ^ ((cum[idx] - cum[start]) & 1)

    err = np.zeros(n, dtype=np.uint8)
    legal = np.where(rd_before == 0, ok_minus, ok_plus)
    err[~legal] = ERR_DISPARITY
    err[invalid] = ERR_SYMBOL
    if n == 0:
        return octets, is_k, err, rd
    last = n - 1
    if invalid[last]:
        final = int(rd_before[last])
    elif forced[last]:
        final = 0 if anchor_rd[last] < 0 else 1
    else:
        final = int(rd_before[last]) ^ int(flips[last])
    return octets, is_k, err, (-1 if final == 0 else 1)


def _flags(is_k, n):
    if np.isscalar(is_k) or np.ndim(is_k) == 0:
        return np.full(n, int(bool(is_k)), dtype=np.uint8)
    arr = np.ascontiguousarray(is_k, dtype=np.uint8)
    if arr.size != n:
        raise ValueError("control flags must match octet count")
    return arr


# ------------------------------------------------------------------ scrambler


@njit
def _scramble_loop(octets, state):
    out = np.empty_like(octets)
    for i in range(octets.shape[0]):
        d = octets[i]
        o = 0
        for b in range(7, -1, -1):
            s = ((d >> b) & 1) ^ ((state >> 13) & 1) ^ ((state >> 14) & 1)
            state = ((state << 1) | s) & 0x7FFF
            o = (o << 1) | s
        out[i] = o
    return out, state


@njit
def _descramble_loop(octets, state):
    out = np.empty_like(octets)
    for i in range(octets.shape[0]):
        c = octets[i]
        o = 0
        for b in range(7, -1, -1):
            s = (c >> b) & 1
            d = s ^ ((state >> 13) & 1) ^ ((state >> 14) & 1)
            state = ((state << 1) | s) & 0x7FFF
            o = (o << 1) | d
        out[i] = o
    return out, state


def scramble_nb(octets, state=0):
    """Scramble an octet array MSB first. Returns ``(scrambled, state)``;
    ``state`` holds the last 15 scrambled bits, most recent in bit 0."""
    octets = np.ascontiguousarray(octets, dtype=np.uint8)
    out, st = _scramble_loop(octets, np.int64(state & _STATE_MASK))
    return out, int(st)


def descramble_nb(octets, state=0):
    octets = np.ascontiguousarray(octets, dtype=np.uint8)
    out, st = _descramble_loop(octets, np.int64(state & _STATE_MASK))
    return out, int(st)


def _state_bits(state):
    # oldest first: s[n-15] .. s[n-1]
    return ((state >> np.arange(14, -1, -1)) & 1).astype(np.uint8)


def _bits_state(bits):
    tail = bits[-15:].astype(np.int64)
    return int((tail << np.arange(tail.size - 1, -1, -1)).sum())


def _fir_gf2(x, lag_a, lag_b):
    y = x.copy()
    if lag_a < x.size:
        y[lag_a:] ^= x[:-lag_a]
    if lag_b < x.size:
        y[lag_b:] ^= x[:-lag_b]
    return y


def descramble_np(octets, state=0):
    octets = np.ascontiguousarray(octets, dtype=np.uint8)
    if octets.size == 0:
        return octets.copy(), state & _STATE_MASK
    s = np.concatenate((_state_bits(state), np.unpackbits(octets)))
    d = s[15:] ^ s[1:-14] ^ s[:-15]
    return np.packbits(d), _bits_state(s)


def scramble_np(octets, state=0):
    # s = u / P(x) over GF(2) with P = 1 + x^14 + x^15. Multiplying through by
    # P^(2^m - 1) gives s[n] = e[n] ^ s[n - 14*2^m] ^ s[n - 15*2^m], which can be
    # solved a whole 14*2^m-bit chunk at a time.
    octets = np.ascontiguousarray(octets, dtype=np.uint8)
    if octets.size == 0:
        return octets.copy(), state & _STATE_MASK
    h = _state_bits(state)
    hx = np.concatenate((np.zeros(15, np.uint8), h))
    prefix = h ^ hx[1:16] ^ hx[0:15]  # pseudo-input reproducing the initial state
    u = np.concatenate((prefix, np.unpackbits(octets)))
    n = u.size
    m = max(0, int(np.log2(max(n / 14.0, 1.0)) // 2))
    e = u
    for j in range(m):
        e = _fir_gf2(e, 14 << j, 15 << j)
    la, lb = 14 << m, 15 << m
    s = np.zeros(n + lb, dtype=np.uint8)  # lb zeros of history in front
    e = np.concatenate((np.zeros(lb, np.uint8), e))
    for c in range(lb, n + lb, la):
        end = min(c + la, n + lb)
        w = end - c
        s[c:end] = e[c:end] ^ s[c - la : c - la + w] ^ s[c - lb : c - lb + w]
    s = s[lb + 15 :]
    return np.packbits(s), _bits_state(np.concatenate((h, s)))


if USE_NUMBA:
    encode_symbols, decode_symbols = encode_symbols_nb, decode_symbols_nb
    scramble, descramble = scramble_nb, descramble_nb
else:
    encode_symbols, decode_symbols = encode_symbols_np, decode_symbols_np
    scramble, descramble = scramble_np, descramble_np

BACKENDS = {
    "numba": dict(encode=encode_symbols_nb, decode=decode_symbols_nb, scramble=scramble_nb, descramble=descramble_nb),
    "numpy": dict(encode=encode_symbols_np, decode=decode_symbols_np, scramble=scramble_np, descramble=descramble_np),
}
