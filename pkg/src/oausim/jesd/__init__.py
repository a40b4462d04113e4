"""Serial link layer: 8b/10b, scrambling, CGS/ILA and elastic alignment."""

from .capture import read_capture, write_capture
from .codec import (
    CodecState,
    CodingError,
    DisparityError,
    SymbolError,
    decode_8b10b,
    encode_8b10b,
)
from .kernels import decode_symbols, descramble, encode_symbols, scramble
from .link import (
    IlaConfig,
    LaneStream,
    LinkAlignmentError,
    LinkConfigError,
    LinkError,
    LinkParams,
    LinkReceiver,
    LinkStatus,
    LinkTransmitter,
    align_links,
    apply_skew,
    rx_link,
    tx_link,
)
