import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oausim.acquisition import BlockGenerator, EventBus, RingBuffer, RingOverflow, RingSequenceError, ring_read, ring_write

BS = 64


def _payload(i):
    return np.full(BS, i & 0xFF, dtype=np.uint8)


def test_write_read_in_order():
    ring = RingBuffer(4 * BS, BS)
    slots = [ring_write(ring, _payload(i)) for i in range(4)]
    assert slots == [0, 1, 2, 3] and ring.occupied == 4
    for i, s in enumerate(slots):
        assert (ring_read(ring, s) == i).all()
    assert ring.occupied == 0


def test_wraparound():
    ring = RingBuffer(2 * BS, BS)
    for i in range(7):
        s = ring.write(_payload(i))
        assert s == i % 2
        assert (ring.read(s) == i).all()
    assert ring.writes == ring.reads == 7


def test_overflow_leaves_buffer_intact():
    ring = RingBuffer(2 * BS, BS)
    ring.write(_payload(1))
    ring.write(_payload(2))
    before = ring.mem.copy()
    with pytest.raises(RingOverflow):
        ring.write(_payload(3))
    assert np.array_equal(ring.mem, before)
    assert ring.overflows == 1
    assert (ring.read(0) == 1).all()
    assert ring.write(_payload(3)) == 0


def test_read_of_free_slot_fails():
    ring = RingBuffer(2 * BS, BS)
    with pytest.raises(RingSequenceError):
        ring.read(0)
    s = ring.write(_payload(0))
    ring.read(s)
    with pytest.raises(RingSequenceError):
        ring.read(s)  # double read
    with pytest.raises(RingSequenceError):
        ring.read(5)


def test_release_consumes_in_place():
    ring = RingBuffer(2 * BS, BS)
    s = ring.write(_payload(9))
    assert (ring.block_view(s) == 9).all()
    ring.release(s)
    assert not ring.is_filled(s)


def test_wrong_payload_size():
    ring = RingBuffer(2 * BS, BS)
    with pytest.raises(ValueError):
        ring.write(np.zeros(BS - 1, np.uint8))
    with pytest.raises(ValueError):
        RingBuffer(100, 64)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), max_size=60), st.integers(1, 6))
def test_model_based(ops, slots):
    """Random write/read sequences against a FIFO model."""
    ring = RingBuffer(slots * BS, BS)
    fifo = []
    counter = 0
    for is_write in ops:
        if is_write:
            if len(fifo) == slots:
                with pytest.raises(RingOverflow):
                    ring.write(_payload(counter))
            else:
                s = ring.write(_payload(counter))
                fifo.append((s, counter))
            counter += 1
        elif fifo:
            s, val = fifo.pop(0)
            assert (ring.read(s) == (val & 0xFF)).all()
        assert ring.occupied == len(fifo)


def test_threaded_producer_consumer_preserves_order():
    ring = RingBuffer(4 * BS, BS, trace=True)
    n = 2000
    rng = np.random.default_rng(3)
    blocks = rng.integers(0, 256, (n, BS), dtype=np.uint8)
    got = []

    def producer():
        for i in range(n):
            ring.wait_free(ring.write_cursor)
            ring.write(blocks[i])

    def consumer():
        slot = 0
        for _ in range(n):
            ring.wait_filled(slot)
            got.append(zlib.crc32(ring.read(slot)))
            slot = (slot + 1) % ring.slots

    threads = [threading.Thread(target=producer), threading.Thread(target=consumer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert got == [zlib.crc32(b) for b in blocks]
    assert ring.overflows == 0
    # trace: every read returns what the matching write stored
    writes = {e.seq: e.crc for e in ring.trace if e.op == "w"}
    reads = {e.seq: e.crc for e in ring.trace if e.op == "r"}
    assert writes == reads and len(writes) == n


def test_block_generator_pads_and_publishes(tmp_path):
    ring = RingBuffer(8 * BS, BS, trace=True)
    bus = EventBus()
    q = bus.subscribe()
    gen = BlockGenerator(ring, bus)
    frame = np.arange(2 * 40, dtype=np.int16).reshape(2, 40)  # 160 bytes -> 3 blocks
    slots = gen.write_frame(frame, event="ev")
    assert slots == [0, 1, 2]
    raw = np.concatenate([ring.block_view(s) for s in slots])
    expect = np.ascontiguousarray(frame.T).astype("<i2").view(np.uint8).ravel()
    assert np.array_equal(raw[: expect.size], expect)
    assert (raw[expect.size :] == 0).all()
    assert [q.get_nowait() for _ in range(3)] == [("block", "ev", i, i) for i in range(3)]
    ring.dump_trace(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().startswith("op,slot,seq,crc32\n")


def test_block_generator_overflow_counts_drop():
    ring = RingBuffer(2 * BS, BS)
    gen = BlockGenerator(ring)
    with pytest.raises(RingOverflow):
        gen.write_frame(np.zeros((1, 100), np.int16))  # 200 bytes, 4 blocks
    assert gen.frames_dropped == 1 and ring.writes == 2
