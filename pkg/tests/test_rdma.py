import math

import numpy as np
import pytest

from oausim.rdma import (
    ChannelModel,
    CmError,
    Fabric,
    MemoryRegion,
    Op,
    Packet,
    QpState,
    QpStateError,
    SimChannel,
    UdpChannel,
    WcStatus,
    WorkRequest,
    cm_handshake,
    connect_pair,
    poll_cq,
    post_batch,
    read_trace,
    throughput_bench,
    write_trace,
)
from oausim.rdma.wire import HEADER_SIZE, PSN_MOD, WireError, psn_add, psn_diff

KIB = 1024


def _run(fabric, qp, n, timeout=1.0):
    assert fabric.run_until(lambda: len(qp.cq) >= n, timeout)
    return poll_cq(qp)


# ------------------------------------------------------------------ wire


def test_packet_roundtrip():
    p = Packet(Op.WRITE, 7, 0xABCDEF, 3, 0xDEADBEEF, 4096, 10000, b"xyz")
    raw = p.encode()
    assert len(raw) == HEADER_SIZE + 3
    q = Packet.decode(raw)
    assert (q.opcode, q.qp_id, q.psn, q.flags, q.rkey, q.remote_offset, q.length) == (Op.WRITE, 7, 0xABCDEF, 3, 0xDEADBEEF, 4096, 10000)
    assert bytes(q.payload) == b"xyz"


def test_packet_rejects_short_or_unknown():
    with pytest.raises(WireError):
        Packet.decode(b"\x01" * 5)
    with pytest.raises(WireError):
        Packet.decode(bytes([99]) + bytes(19))


def test_psn_arithmetic_wraps():
    assert psn_add(PSN_MOD - 1, 2) == 1
    assert psn_diff(1, PSN_MOD - 1) == 2
    assert psn_diff(PSN_MOD - 1, 1) == -2


def test_trace_roundtrip(tmp_path):
    model = ChannelModel(loss_probability=0.2, seed=1)
    fabric, qp, mr = connect_pair(model, remote_size=64 * KIB, trace=True)
    post_batch(qp, [WorkRequest(1, "WRITE", np.ones(20000, np.uint8), 0)])
    _run(fabric, qp, 1)
    recs = fabric.channel.trace
    write_trace(tmp_path / "t.rtrc", recs)
    back = read_trace(tmp_path / "t.rtrc")
    assert len(back) == len(recs)
    assert all(a.data == b.data and a.event == b.event and a.time == b.time for a, b in zip(recs, back))
    assert {r.event for r in back} == {0, 1, 2}
    assert back[0].packet.opcode == Op.CM_REQ


# ------------------------------------------------------------ connection


def test_handshake_lossless():
    fabric = Fabric(SimChannel())
    a, b = fabric.add_endpoint("a"), fabric.add_endpoint("b")
    mr = b.register_memory(np.zeros(4096, np.uint8))
    qp, rqp = cm_handshake(fabric, a, b, mr)
    assert qp.state is QpState.READY and rqp.state is QpState.READY
    assert qp.remote_mr.rkey == mr.rkey and qp.remote_mr.length == 4096
    assert qp.remote_qp == rqp.qp_id and rqp.remote_qp == qp.qp_id
    assert a.stats.cm_retries == 0


def test_handshake_survives_loss():
    fabric = Fabric(SimChannel(ChannelModel(loss_probability=0.3, seed=5)))
    a, b = fabric.add_endpoint("a", cm_retries=30), fabric.add_endpoint("b", cm_retries=30)
    mr = b.register_memory(np.zeros(4096, np.uint8))
    qp, _ = cm_handshake(fabric, a, b, mr)
    assert qp.remote_mr.rkey == mr.rkey
    assert a.stats.cm_retries + b.stats.retransmits + a.stats.retransmits > 0


def test_handshake_without_listener_fails():
    fabric = Fabric(SimChannel())
    a, b = fabric.add_endpoint("a"), fabric.add_endpoint("b")
    qp = a.connect(b.addr, fabric.now)
    fabric.idle(a.cm_timeout * (a.cm_retries + 2))
    assert a.cm_state(qp) == "failed" and qp.state is QpState.ERROR


def test_handshake_absent_peer_raises():
    fabric = Fabric(SimChannel(ChannelModel(loss_probability=1.0)))
    a, b = fabric.add_endpoint("a"), fabric.add_endpoint("b")
    with pytest.raises(CmError):
        cm_handshake(fabric, a, b, b.register_memory(np.zeros(16, np.uint8)))


def test_rkeys_unique():
    fabric = Fabric(SimChannel())
    b = fabric.add_endpoint("b")
    keys = [b.register_memory(np.zeros(8, np.uint8)).rkey for _ in range(500)]
    assert len(set(keys)) == 500 and all(0 < k < 2**32 for k in keys)


def test_memory_region_description():
    mr = MemoryRegion(0x1000, 4096, 1234)
    assert MemoryRegion.from_description(mr.describe()) == mr
    assert mr.contains(0, 4096) and not mr.contains(1, 4096) and not mr.contains(-1, 1)


# ------------------------------------------------------------ transfers


def test_batch_of_eight_blocks_bit_exact():
    fabric, qp, mr = connect_pair(remote_size=8 * 256 * KIB)
    src = np.random.default_rng(0).integers(0, 256, 8 * 256 * KIB, dtype=np.uint8)
    blocks = [WorkRequest(i, "WRITE", src[i * 256 * KIB : (i + 1) * 256 * KIB], i * 256 * KIB) for i in range(8)]
    assert post_batch(qp, blocks) == 8
    done = _run(fabric, qp, 8)
    assert [c.wr_id for c in done] == list(range(8))
    assert all(c.status is WcStatus.SUCCESS and c.byte_len == 256 * KIB for c in done)
    assert np.array_equal(mr.buffer, src)


def test_batch_of_one_equals_batch_of_many():
    src = np.random.default_rng(1).integers(0, 256, 40000, dtype=np.uint8)
    parts = [(0, 9000), (9000, 20000), (20000, 40000)]
    results = []
    for batch in (1, 3):
        fabric, qp, mr = connect_pair(remote_size=src.size)
        wrs = [WorkRequest(i, "WRITE", src[a:b], a) for i, (a, b) in enumerate(parts)]
        for lo in range(0, 3, batch):
            post_batch(qp, wrs[lo : lo + batch])
            _run(fabric, qp, min(batch, 3 - lo))
        results.append(mr.buffer.copy())
    assert np.array_equal(results[0], results[1]) and np.array_equal(results[0], src)


def test_packet_accounting_lossless():
    fabric, qp, mr = connect_pair(remote_size=1 << 20)
    a = fabric.endpoints[0]
    sent0 = a.stats.data_packets_sent
    lengths = [1, 4095, 4096, 4097, 100000]
    off = 0
    wrs = []
    for i, n in enumerate(lengths):
        wrs.append(WorkRequest(i, "WRITE", np.full(n, i, np.uint8), off))
        off += n
    post_batch(qp, wrs)
    _run(fabric, qp, len(wrs))
    segs = sum(math.ceil(n / 4096) for n in lengths)
    assert a.stats.data_packets_sent - sent0 == segs
    assert a.stats.retransmits == 0


def test_duplicates_applied_once():
    model = ChannelModel(duplicate_probability=0.3, seed=2)
    fabric, qp, mr = connect_pair(model, remote_size=200 * KIB)
    src = np.random.default_rng(2).integers(0, 256, 200 * KIB, dtype=np.uint8)
    post_batch(qp, [WorkRequest(0, "WRITE", src, 0)])
    done = _run(fabric, qp, 1)
    host = fabric.endpoints[1]
    assert done[0].status is WcStatus.SUCCESS
    assert fabric.channel.duplicated > 0 and host.stats.duplicates > 0
    assert host.stats.bytes_applied == src.size
    assert np.array_equal(mr.buffer, src)


def test_loss_and_reorder_recovered():
    model = ChannelModel(loss_probability=0.05, reorder=True, reorder_probability=0.3, seed=9)
    fabric, qp, mr = connect_pair(model, remote_size=512 * KIB)
    src = np.random.default_rng(9).integers(0, 256, 512 * KIB, dtype=np.uint8)
    wrs = [WorkRequest(i, "WRITE", src[i * 64 * KIB : (i + 1) * 64 * KIB], i * 64 * KIB) for i in range(8)]
    post_batch(qp, wrs)
    done = _run(fabric, qp, 8)
    assert [c.wr_id for c in done] == list(range(8))
    assert all(c.status is WcStatus.SUCCESS for c in done)
    assert np.array_equal(mr.buffer, src)
    assert fabric.endpoints[0].stats.retransmits > 0


def test_psn_wraps_mid_transfer():
    fabric, qp, mr = connect_pair(remote_size=64 * KIB)
    host = fabric.endpoints[1]
    rqp = next(q for q in host.qps.values() if q.remote_qp == qp.qp_id)
    # move both ends close to the 24-bit boundary
    start = PSN_MOD - 3
    req = fabric.endpoints[0]._req[qp.qp_id]
    qp.send_psn = (start - req.assigned) % PSN_MOD
    rqp.expected_psn = (start - host._resp[rqp.qp_id].expected) % PSN_MOD
    src = np.arange(64 * KIB, dtype=np.uint32).astype(np.uint8)
    post_batch(qp, [WorkRequest(5, "WRITE", src, 0)])
    done = _run(fabric, qp, 1)
    assert done[0].status is WcStatus.SUCCESS and np.array_equal(mr.buffer, src)


def test_send_delivers_message():
    fabric, qp, _ = connect_pair()
    host = fabric.endpoints[1]
    rqp = next(q for q in host.qps.values() if q.remote_qp == qp.qp_id)
    msg = bytes(range(256)) * 40
    post_batch(qp, [WorkRequest(1, "SEND", msg)])
    _run(fabric, qp, 1)
    assert rqp.recv_queue.popleft() == msg


# ------------------------------------------------------------ failures


def test_stale_rkey_is_remote_access_error():
    fabric, qp, mr = connect_pair(remote_size=8 * KIB)
    host = fabric.endpoints[1]
    host.deregister_memory(mr)
    post_batch(qp, [WorkRequest(1, "WRITE", np.ones(100, np.uint8), 0), WorkRequest(2, "WRITE", np.ones(10, np.uint8), 0)])
    done = _run(fabric, qp, 2)
    assert [c.status for c in done] == [WcStatus.REMOTE_ACCESS_ERROR, WcStatus.FLUSHED]
    assert qp.state is QpState.ERROR
    assert not mr.buffer.any()


def test_out_of_range_write_touches_nothing():
    fabric, qp, mr = connect_pair(remote_size=8 * KIB)
    post_batch(qp, [WorkRequest(1, "WRITE", np.ones(6000, np.uint8), 4 * KIB)])
    done = _run(fabric, qp, 1)
    assert done[0].status is WcStatus.REMOTE_ACCESS_ERROR
    assert not mr.buffer.any()


def test_total_loss_exhausts_retries():
    fabric, qp, mr = connect_pair(remote_size=64 * KIB)
    fabric.channel.model.loss_probability = 1.0
    wrs = [WorkRequest(i, "WRITE", np.ones(8 * KIB, np.uint8), i * 8 * KIB) for i in range(3)]
    post_batch(qp, wrs)
    done = _run(fabric, qp, 3, timeout=10.0)
    assert [c.status for c in done] == [WcStatus.RETRY_EXCEEDED, WcStatus.FLUSHED, WcStatus.FLUSHED]
    assert qp.state is QpState.ERROR
    assert fabric.endpoints[0].stats.timeouts == 8  # budget of 7 plus the failing one
    with pytest.raises(QpStateError):
        post_batch(qp, wrs[:1])


def test_qp_state_machine():
    fabric = Fabric(SimChannel())
    a = fabric.add_endpoint("a")
    qp = a.create_qp()
    with pytest.raises(QpStateError):
        qp.post([WorkRequest(0, "SEND", b"x")])
    with pytest.raises(QpStateError):
        qp.modify(QpState.READY)  # reset -> ready skips init
    qp.modify(QpState.INIT)
    qp.modify(QpState.READY)
    qp.modify(QpState.ERROR)
    qp.modify(QpState.RESET)


def test_send_queue_backpressure():
    fabric, qp, mr = connect_pair(remote_size=64 * KIB)
    qp.sq_depth = 4
    wrs = [WorkRequest(i, "WRITE", np.ones(16, np.uint8), 16 * i) for i in range(6)]
    assert post_batch(qp, wrs) == 4
    _run(fabric, qp, 4)
    assert post_batch(qp, wrs[4:]) == 2


def test_work_request_validation():
    with pytest.raises(ValueError):
        WorkRequest(0, "READ", b"x")
    with pytest.raises(ValueError):
        WorkRequest(0, "WRITE", b"")
    with pytest.raises(ValueError):
        WorkRequest(0, "WRITE", b"x", -1)
    with pytest.raises(ValueError):
        ChannelModel(loss_probability=1.5)


# ------------------------------------------------------------ real sockets


def test_udp_channel_transfer():
    peers = {"fpga": ("127.0.0.1", 0), "host": ("127.0.0.1", 0)}
    ch = UdpChannel(peers, ChannelModel(mtu=1024))
    try:
        fabric = Fabric(ch)
        a = fabric.add_endpoint("fpga", rtt_initial=1e-3)
        b = fabric.add_endpoint("host", rtt_initial=1e-3)
        mr = b.register_memory(np.zeros(16 * KIB, np.uint8))
        qp, _ = cm_handshake(fabric, a, b, mr, timeout=5.0)
        src = np.random.default_rng(4).integers(0, 256, 16 * KIB, dtype=np.uint8)
        post_batch(qp, [WorkRequest(1, "WRITE", src, 0)])
        done = _run(fabric, qp, 1, timeout=5.0)
        assert done[0].status is WcStatus.SUCCESS
        assert np.array_equal(mr.buffer, src)
    finally:
        ch.close()


# ------------------------------------------------------------ benchmark


def test_bench_small_grid_shape():
    small = throughput_bench(64 * KIB, 1, repeats=2, iterations=2)
    big = throughput_bench(256 * KIB, 4, repeats=2, iterations=2)
    assert len(small.runs) == 2
    assert 0 < small.mean < big.mean < 100.0
