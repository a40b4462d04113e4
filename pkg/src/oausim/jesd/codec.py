"""8b/10b line coding.

Symbols are 10-bit integers in transmission order ``abcdei fghj`` with ``a``
in bit 9. Octets are ``HGFEDCBA``; the low five bits select the 5b/6b code and
the high three bits the 3b/4b code.

The tables are built once at import time from the RD- codes and the
complement rule. Stream helpers live in :mod:`oausim.jesd.kernels`.
"""

from dataclasses import dataclass

import numpy as np

RD_MINUS = -1
RD_PLUS = 1

K28_0 = 0x1C  # /R/ multiframe start during ILA
K28_3 = 0x7C  # /A/ multiframe end
K28_4 = 0x9C  # /Q/ ILA configuration marker
K28_5 = 0xBC  # /K/ comma
K28_7 = 0xFC  # /F/

CONTROL_OCTETS = (
    0x1C, 0x3C, 0x5C, 0x7C, 0x9C, 0xBC, 0xDC, 0xFC,  # K28.0 .. K28.7
    0xF7, 0xFB, 0xFD, 0xFE,                          # K23.7 K27.7 K29.7 K30.7
)

COMMA_PLUS = 0b0011111   # seven-bit comma as seen after RD- K28.5
COMMA_MINUS = 0b1100000

# RD- forms; the RD+ form is the bitwise complement for unbalanced codes and D.07.
_6B = [
    0b100111, 0b011101, 0b101101, 0b110001, 0b110101, 0b101001, 0b011001, 0b111000,
    0b111001, 0b100101, 0b010101, 0b110100, 0b001101, 0b101100, 0b011100, 0b010111,
    0b011011, 0b100011, 0b010011, 0b110010, 0b001011, 0b101010, 0b011010, 0b111010,
    0b110011, 0b100110, 0b010110, 0b110110, 0b001110, 0b101110, 0b011110, 0b101011,
]
_K28_6B = 0b001111
_4B_DATA = [0b1011, 0b1001, 0b0101, 0b1100, 0b1101, 0b1010, 0b0110, 0b1110]
_4B_ALT7 = 0b0111
_4B_CTRL = [0b1011, 0b0110, 0b1010, 0b1100, 0b1101, 0b0101, 0b1001, 0b0111]


class CodingError(ValueError):
    """Octet cannot be encoded (e.g. unsupported control code)."""


class SymbolError(ValueError):
    """10-bit value is not a valid code group."""


class DisparityError(ValueError):
    """Code group is valid but not for the current running disparity."""

    def __init__(self, msg, octet, is_control, next_state):
        super().__init__(msg)
        self.octet = octet
        self.is_control = is_control
        self.next_state = next_state


def _disparity(word, nbits):
    ones = bin(word).count("1")
    return 2 * ones - nbits


def _encode_reference(octet, is_control, rd):
    x = octet & 0x1F
    y = octet >> 5
    if is_control:
        if octet not in CONTROL_OCTETS:
            raise CodingError(f"0x{octet:02X} is not a supported control code")
        c6 = _K28_6B if x == 28 else _6B[x]
    else:
        c6 = _6B[x]
    if rd == RD_PLUS and (_disparity(c6, 6) != 0 or c6 == 0b111000):
        c6 ^= 0x3F
    d6 = _disparity(c6, 6)
    rd6 = rd if d6 == 0 else (1 if d6 > 0 else -1)

    if is_control:
        c4 = _4B_CTRL[y]
        flip = rd6 == RD_PLUS
    else:
        c4 = _4B_DATA[y]
        if y == 7 and ((rd6 == RD_MINUS and x in (17, 18, 20)) or (rd6 == RD_PLUS and x in (11, 13, 14))):
            c4 = _4B_ALT7
        flip = rd6 == RD_PLUS and (_disparity(c4, 4) != 0 or c4 == 0b1100)
    if flip:
        c4 ^= 0xF
    d4 = _disparity(c4, 4)
    rd4 = rd6 if d4 == 0 else (1 if d4 > 0 else -1)
    return (c6 << 4) | c4, rd4


def _rd_index(rd):
    return 0 if rd == RD_MINUS else 1


def _build_tables():
    # ENC[rd_idx, k, octet] -> symbol (-1 when the control octet is unsupported)
    enc = np.full((2, 2, 256), -1, dtype=np.int16)
    flips = np.zeros((2, 256), dtype=np.uint8)
    dec_value = np.full(1024, -1, dtype=np.int16)  # octet | (k << 8)
    dec_valid = np.zeros((2, 1024), dtype=np.bool_)
    next_rd = np.zeros((2, 1024), dtype=np.int8)
    for k in (0, 1):
        for octet in range(256):
            if k and octet not in CONTROL_OCTETS:
                continue
            for rd in (RD_MINUS, RD_PLUS):
                sym, rd_out = _encode_reference(octet, bool(k), rd)
                ri = _rd_index(rd)
                enc[ri, k, octet] = sym
                value = octet | (k << 8)
                if dec_value[sym] not in (-1, value):
                    raise AssertionError("8b/10b table collision")
                dec_value[sym] = value
                dec_valid[ri, sym] = True
                next_rd[ri, sym] = rd_out
                flip = int(rd_out != rd)
                if rd == RD_MINUS:
                    flips[k, octet] = flip
                elif flips[k, octet] != flip:
                    raise AssertionError("disparity flip depends on running disparity")
    return enc, flips, dec_value, dec_valid, next_rd


ENC_TABLE, FLIP_TABLE, DEC_VALUE, DEC_VALID, NEXT_RD = _build_tables()
for _t in (ENC_TABLE, FLIP_TABLE, DEC_VALUE, DEC_VALID, NEXT_RD):
    _t.setflags(write=False)


@dataclass(frozen=True)
class CodecState:
    running_disparity: int = RD_MINUS

    def __post_init__(self):
        if self.running_disparity not in (RD_MINUS, RD_PLUS):
            raise ValueError("running disparity must be -1 or +1")


def encode_8b10b(octet, is_control=False, state=CodecState()):
    """Encode one octet. Returns ``(symbol, new_state)``."""
    if not 0 <= octet <= 0xFF:
        raise CodingError(f"octet out of range: {octet}")
    ri = _rd_index(state.running_disparity)
    sym = int(ENC_TABLE[ri, int(bool(is_control)), octet])
    if sym < 0:
        raise CodingError(f"0x{octet:02X} is not a supported control code")
    return sym, CodecState(int(NEXT_RD[ri, sym]))


def decode_8b10b(symbol, state=CodecState()):
    """Decode one code group. Returns ``(octet, is_control, new_state)``.

    Raises :class:`SymbolError` for values outside the code table and
    :class:`DisparityError` for a code group that is only legal under the
    opposite running disparity; the latter carries the decoded value and the
    state the decoder resynchronises to.
    """
    if not 0 <= symbol < 1024:
        raise SymbolError(f"not a 10-bit value: {symbol}")
    value = int(DEC_VALUE[symbol])
    if value < 0:
        raise SymbolError(f"invalid code group 0b{symbol:010b}")
    octet, is_control = value & 0xFF, bool(value >> 8)
    ri = _rd_index(state.running_disparity)
    if not DEC_VALID[ri, symbol]:
        nxt = CodecState(int(NEXT_RD[1 - ri, symbol]))
        raise DisparityError(
            f"code group 0b{symbol:010b} violates RD{'+' if ri else '-'}", octet, is_control, nxt
        )
    return octet, is_control, CodecState(int(NEXT_RD[ri, symbol]))


def symbol_bits(symbols):
    """Unpack 10-bit symbols into a flat bit array, ``a`` bit first."""
    symbols = np.asarray(symbols, dtype=np.uint16)
    shifts = np.arange(9, -1, -1, dtype=np.uint16)
    return ((symbols[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def bits_to_symbols(bits):
    bits = np.asarray(bits, dtype=np.uint16)
    n = bits.size // 10
    weights = (1 << np.arange(9, -1, -1)).astype(np.uint16)
    return (bits[: n * 10].reshape(n, 10) * weights).sum(axis=1).astype(np.uint16)


def find_commas(bits):
    """Bit offsets where a seven-bit comma pattern starts."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size < 7:
        return np.empty(0, dtype=np.int64)
    win = np.lib.stride_tricks.sliding_window_view(bits, 7)
    vals = win @ (1 << np.arange(6, -1, -1))
    return np.flatnonzero((vals == COMMA_PLUS) | (vals == COMMA_MINUS))
