"""Reliable-connection protocol engine, connection manager and scheduler.

Requester side: work requests are cut into ``mtu``-byte segments with
consecutive PSNs and sent within a window. The responder acknowledges every
in-order segment cumulatively, re-acknowledges duplicates without applying
them, and sends one NAK per gap. The requester goes back to the NAKed PSN
(go-back-N), and on timeout (3x the RTT estimate, restarted on progress)
goes back to the oldest unacknowledged PSN. After ``retry_budget`` timeouts
without progress the head request completes with ``RETRY_EXCEEDED`` and the
queue pair enters the error state; later requests are flushed.
"""

import bisect
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .channel import SimChannel
from .verbs import (
    CmError,
    MemoryRegion,
    QpKind,
    QpState,
    QueuePair,
    WcStatus,
    WorkRequest,
)
from .wire import (
    FLAG_FIRST,
    FLAG_LAST,
    FLAG_RETRY,
    PSN_MASK,
    Op,
    Packet,
    WireError,
    psn_diff,
)

log = logging.getLogger(__name__)

UD_QP = 1
_CM = struct.Struct("!HII")  # sender qp, initial psn, peer qp (0 if unknown)
_MR_BASE0 = 0x7F00_0000_0000


@dataclass
class EngineStats:
    packets_sent: int = 0
    packets_received: int = 0
    data_packets_sent: int = 0
    retransmits: int = 0
    acks_sent: int = 0
    naks_sent: int = 0
    timeouts: int = 0
    duplicates: int = 0
    bytes_applied: int = 0
    cm_retries: int = 0


class _Requester:
    """Send-side state of one RC queue pair."""

    def __init__(self, qp, mtu, window):
        self.qp = qp
        self.mtu = mtu
        self.window = window
        self.wrs = []  # [wr, first_seq, nseg]
        self.firsts = []
        self.head = 0
        self.base = 0  # oldest unacknowledged segment
        self.next = 0  # next segment to transmit
        self.assigned = 0
        self.high = 0  # one past the highest segment ever sent
        self.deadline = None
        self.retries = 0
        self.sent_at = {}

    def psn(self, seq):
        return (self.qp.send_psn + seq) & PSN_MASK

    def has_work(self):
        if self.next < self.base + self.window:
            return self.next < self.assigned or bool(self.qp.sq)
        return False

    def locate(self, seq):
        i = bisect.bisect_right(self.firsts, seq, lo=self.head) - 1
        return self.wrs[i]

    def outstanding(self):
        return self.base < self.next


class _Responder:
    def __init__(self):
        self.expected = 0
        self.nak_sent = False
        self.msg = []
        self.cur_ok = False


class Endpoint:
    """One RDMA-capable node attached to a channel."""

    def __init__(self, channel, name, mtu=None, window=32, retry_budget=7, rtt_initial=None, min_timeout=1e-6, cm_timeout=None, cm_retries=8, seed=0):
        self.channel = channel
        self.name = name
        self.addr = channel.attach(name)
        self.mtu = mtu or channel.model.mtu
        self.window = window
        self.retry_budget = retry_budget
        if rtt_initial is None:
            m = channel.model
            if isinstance(channel, SimChannel):
                rtt_initial = 2 * m.one_way_delay + 2 * (self.mtu + 64) * 8 / m.bandwidth + (m.reorder_delay if m.reorder else 0.0)
            else:
                rtt_initial = 1e-3
        self.rtt = rtt_initial
        self.min_timeout = min_timeout
        self.cm_timeout = cm_timeout if cm_timeout is not None else max(10 * rtt_initial, 10e-6)
        self.cm_retries = cm_retries
        self.rng = np.random.default_rng([seed, self.addr])
        self.stats = EngineStats()
        self.qps = {}
        self.mrs = {}
        self._issued_rkeys = set()
        self._mr_base = _MR_BASE0
        self._req = {}
        self._resp = {}
        self._next_qp = 2
        self._peers = {}  # (remote addr, remote qp) -> local qp id
        self.listening = None
        self._cm = {}  # local qp id -> dict(state, deadline, tries, peer)
        self.ud = QueuePair(UD_QP, QpKind.UD)
        for s in (QpState.INIT, QpState.READY):
            self.ud.modify(s)

    # ------------------------------------------------------------- resources

    @property
    def timeout(self):
        return max(3.0 * self.rtt, self.min_timeout)

    def create_qp(self, kind=QpKind.RC, sq_depth=1024):
        qp = QueuePair(self._next_qp, kind, sq_depth)
        self._next_qp += 1
        self.qps[qp.qp_id] = qp
        if kind is QpKind.RC:
            self._req[qp.qp_id] = _Requester(qp, self.mtu, self.window)
            self._resp[qp.qp_id] = _Responder()
        return qp

    def register_memory(self, buffer):
        buf = buffer if isinstance(buffer, np.ndarray) else np.frombuffer(buffer, dtype=np.uint8)
        if buf.dtype != np.uint8 or buf.ndim != 1:
            buf = buf.view(np.uint8).reshape(-1)
        if buf.size == 0:
            raise ValueError("cannot register an empty buffer")
        while True:
            rkey = int(self.rng.integers(1, 1 << 32))
            if rkey not in self._issued_rkeys:
                break
        self._issued_rkeys.add(rkey)
        mr = MemoryRegion(self._mr_base, int(buf.size), rkey, buf)
        self._mr_base += (buf.size + 0xFFF) & ~0xFFF
        self.mrs[rkey] = mr
        return mr

    def deregister_memory(self, mr):
        self.mrs.pop(mr.rkey, None)

    def listen(self, mr=None):
        """Accept connection requests; ``mr`` is advertised to each initiator."""
        self.listening = mr if mr is not None else True

    def stop_listening(self):
        self.listening = None

    # ------------------------------------------------------------------ I/O

    def _send(self, dst, pkt):
        self.channel.send(self.addr, dst, pkt.encode())
        self.stats.packets_sent += 1

    def next_deadline(self):
        t = math.inf
        for r in self._req.values():
            if r.deadline is not None and r.qp.state is QpState.READY:
                t = min(t, r.deadline)
        for c in self._cm.values():
            if c["deadline"] is not None:
                t = min(t, c["deadline"])
        return t

    def has_work(self):
        return any(r.qp.state is QpState.READY and r.has_work() for r in self._req.values())

    def engine_step(self, now):
        """Consume arrived packets, fire timers, transmit. Returns
        ``(emitted, consumed)`` packet counts."""
        sent0 = self.stats.packets_sent
        got = self.channel.receive(self.addr)
        for src, raw in got:
            self.stats.packets_received += 1
            try:
                pkt = Packet.decode(raw)
            except WireError as e:
                log.debug("dropping malformed datagram: %s", e)
                continue
            self._dispatch(src, pkt, now)
        self._timers(now)
        for r in self._req.values():
            if r.qp.state is QpState.READY:
                self._transmit(r, now)
        return self.stats.packets_sent - sent0, len(got)

    def _dispatch(self, src, pkt, now):
        op = pkt.opcode
        if op in (Op.CM_REQ, Op.CM_REP, Op.CM_RTU):
            self._on_cm(src, pkt, now)
            return
        qp = self.qps.get(pkt.qp_id)
        if qp is None or qp.kind is not QpKind.RC or qp.remote_addr != src:
            return
        if op in (Op.WRITE, Op.SEND):
            if qp.state is QpState.INIT and pkt.qp_id in self._cm:
                # first data packet doubles as the ready-to-use message
                self._cm_responder_ready(qp, now)
            if qp.state is QpState.READY:
                self._on_data(qp, pkt)
        elif op in (Op.ACK, Op.NAK, Op.NAK_ACCESS):
            if qp.state is QpState.READY:
                self._on_ack(self._req[qp.qp_id], pkt, now)

    # ------------------------------------------------------------- responder

    def _reply(self, qp, op, seq):
        psn = (qp.expected_psn + seq) & PSN_MASK
        self._send(qp.remote_addr, Packet(op, qp.remote_qp, psn))

    def _on_data(self, qp, pkt):
        rs = self._resp[qp.qp_id]
        exp_psn = (qp.expected_psn + rs.expected) & PSN_MASK
        d = psn_diff(pkt.psn, exp_psn)
        if d < 0:
            self.stats.duplicates += 1
            self._reply(qp, Op.ACK, rs.expected - 1)
            self.stats.acks_sent += 1
            return
        if d > 0:
            if not rs.nak_sent:
                rs.nak_sent = True
                self._reply(qp, Op.NAK, rs.expected)
                self.stats.naks_sent += 1
            return
        rs.nak_sent = False
        payload = pkt.payload
        if pkt.opcode == Op.WRITE:
            if pkt.flags & FLAG_FIRST:
                mr = self.mrs.get(pkt.rkey)
                rs.cur_ok = mr is not None and mr.contains(pkt.remote_offset, pkt.length)
            mr = self.mrs.get(pkt.rkey)
            n = len(payload)
            if not (rs.cur_ok and mr is not None and mr.contains(pkt.remote_offset, n)):
                self._reply(qp, Op.NAK_ACCESS, rs.expected)
                qp.modify(QpState.ERROR)
                return
            mr.buffer[pkt.remote_offset : pkt.remote_offset + n] = np.frombuffer(payload, dtype=np.uint8)
            self.stats.bytes_applied += n
        else:
            if pkt.flags & FLAG_FIRST:
                rs.msg = []
            rs.msg.append(bytes(payload))
            if pkt.flags & FLAG_LAST:
                msg = b"".join(rs.msg)
                rs.msg = []
                self._on_message(qp, msg)
        self._reply(qp, Op.ACK, rs.expected)
        self.stats.acks_sent += 1
        rs.expected += 1

    def _on_message(self, qp, msg):
        cm = self._cm.get(qp.qp_id)
        if cm is not None and cm["state"] == "await_mr" and msg[:2] == b"MR":
            qp.remote_mr = MemoryRegion.from_description(msg)
            cm["state"] = "connected"
            cm["deadline"] = None
            return
        with qp.lock:
            qp.recv_queue.append(msg)

    # ------------------------------------------------------------- requester

    def _transmit(self, r, now):
        qp = r.qp
        while r.next < r.base + r.window:
            if r.next == r.assigned:
                wr = qp._take_wr()
                if wr is None:
                    break
                nseg = -(-wr.length // self.mtu)
                r.wrs.append([wr, r.assigned, nseg])
                r.firsts.append(r.assigned)
                r.assigned += nseg
            wr, first, nseg = r.locate(r.next)
            i = r.next - first
            flags = (FLAG_FIRST if i == 0 else 0) | (FLAG_LAST if i == nseg - 1 else 0)
            if r.next < r.high:
                flags |= FLAG_RETRY
                self.stats.retransmits += 1
                r.sent_at.pop(r.next, None)
            else:
                r.sent_at[r.next] = now
            lo = i * self.mtu
            chunk = wr.data[lo : lo + self.mtu]
            if wr.opcode == "WRITE":
                pkt = Packet(Op.WRITE, qp.remote_qp, r.psn(r.next), flags, wr.rkey, wr.remote_offset + lo, wr.length, chunk.tobytes())
            else:
                pkt = Packet(Op.SEND, qp.remote_qp, r.psn(r.next), flags, 0, lo, wr.length, chunk.tobytes())
            self._send(qp.remote_addr, pkt)
            self.stats.data_packets_sent += 1
            if not r.outstanding():
                r.deadline = now + self.timeout
            r.next += 1
            r.high = max(r.high, r.next)

    def _advance(self, r, upto, now):
        """Cumulative acknowledgement of every segment below ``upto``."""
        if upto <= r.base:
            return
        t0 = r.sent_at.get(upto - 1)
        if t0 is not None:
            self.rtt = 0.875 * self.rtt + 0.125 * (now - t0)
        for s in range(r.base, upto):
            r.sent_at.pop(s, None)
        r.base = upto
        r.next = max(r.next, upto)
        r.retries = 0
        r.deadline = now + self.timeout if r.outstanding() else None
        while r.head < len(r.wrs) and r.wrs[r.head][1] + r.wrs[r.head][2] <= r.base:
            wr = r.wrs[r.head][0]
            r.wrs[r.head] = None
            r.head += 1
            r.qp._complete(wr, WcStatus.SUCCESS)
        if r.head > 1024:
            del r.wrs[: r.head]
            del r.firsts[: r.head]
            r.head = 0

    def _on_ack(self, r, pkt, now):
        # map the 24-bit PSN back to a segment number near the window
        seq = r.base + psn_diff(pkt.psn, r.psn(r.base))
        if pkt.opcode == Op.ACK:
            if r.base <= seq < r.next:
                self._advance(r, seq + 1, now)
        elif pkt.opcode == Op.NAK:
            if r.base <= seq <= r.next:
                self._advance(r, seq, now)
                r.next = seq
        else:
            if r.base <= seq < r.assigned:
                self._advance(r, seq, now)
                self._fail(r, WcStatus.REMOTE_ACCESS_ERROR)

    def _fail(self, r, status):
        """Complete the head request with ``status``, flush the rest."""
        qp = r.qp
        qp.modify(QpState.ERROR)
        r.deadline = None
        first = True
        for item in r.wrs[r.head :]:
            qp._complete(item[0], status if first else WcStatus.FLUSHED)
            first = False
        r.wrs, r.firsts, r.head = [], [], 0
        while True:
            wr = qp._take_wr()
            if wr is None:
                break
            qp._complete(wr, status if first else WcStatus.FLUSHED)
            first = False

    def _timers(self, now):
        for r in self._req.values():
            if r.deadline is None or now < r.deadline or r.qp.state is not QpState.READY:
                continue
            if not r.outstanding():
                r.deadline = None
                continue
            r.retries += 1
            self.stats.timeouts += 1
            if r.retries > self.retry_budget:
                log.info("QP %d: retry budget exhausted", r.qp.qp_id)
                self._fail(r, WcStatus.RETRY_EXCEEDED)
                continue
            r.next = r.base
            r.deadline = now + self.timeout
        for qid, c in list(self._cm.items()):
            if c["deadline"] is not None and now >= c["deadline"]:
                self._cm_timeout(qid, c, now)

    # ---------------------------------------------------- connection manager

    def connect(self, peer, now, expect_mr=True):
        """Start a connection to endpoint address ``peer``; returns the RC QP.
        With ``expect_mr`` the connection completes once the peer's memory
        region advertisement has arrived."""
        qp = self.create_qp()
        qp.modify(QpState.INIT)
        qp.send_psn = int(self.rng.integers(0, PSN_MASK + 1))
        qp.remote_addr = peer
        self._cm[qp.qp_id] = dict(state="req_sent", deadline=now + self.cm_timeout, tries=0, expect_mr=expect_mr)
        self._send_cm(qp, Op.CM_REQ)
        return qp

    def _send_cm(self, qp, op):
        payload = _CM.pack(qp.qp_id, qp.send_psn, qp.remote_qp or 0)
        self._send(qp.remote_addr, Packet(op, UD_QP, 0, 0, 0, 0, len(payload), payload))

    def _cm_timeout(self, qid, c, now):
        qp = self.qps[qid]
        c["tries"] += 1
        self.stats.cm_retries += 1
        if c["tries"] > self.cm_retries:
            c["state"] = "failed"
            c["deadline"] = None
            qp.modify(QpState.ERROR)
            return
        c["deadline"] = now + self.cm_timeout
        if c["state"] == "req_sent":
            self._send_cm(qp, Op.CM_REQ)
        elif c["state"] == "await_mr":
            self._send_cm(qp, Op.CM_RTU)

    def _on_cm(self, src, pkt, now):
        try:
            their_qp, their_psn, mine = _CM.unpack(bytes(pkt.payload[: _CM.size]))
        except struct.error:
            return
        if pkt.opcode == Op.CM_REQ:
            if self.listening is None:
                return
            qid = self._peers.get((src, their_qp))
            if qid is None:
                qp = self.create_qp()
                qp.modify(QpState.INIT)
                qp.send_psn = int(self.rng.integers(0, PSN_MASK + 1))
                qp.expected_psn = their_psn
                qp.remote_addr, qp.remote_qp = src, their_qp
                self._peers[(src, their_qp)] = qp.qp_id
                self._cm[qp.qp_id] = dict(state="rep_sent", deadline=None, tries=0, expect_mr=False)
            else:
                qp = self.qps[qid]
            self._send_cm(qp, Op.CM_REP)
        elif pkt.opcode == Op.CM_REP:
            qp = self.qps.get(mine)
            c = self._cm.get(mine)
            if qp is None or c is None or qp.remote_addr != src:
                return
            if c["state"] == "req_sent":
                qp.remote_qp = their_qp
                qp.expected_psn = their_psn
                qp.modify(QpState.READY)
                if c["expect_mr"]:
                    c["state"] = "await_mr"
                    c["deadline"] = now + self.cm_timeout
                else:
                    c["state"] = "connected"
                    c["deadline"] = None
            self._send_cm(qp, Op.CM_RTU)
        else:
            qp = self.qps.get(mine)
            if qp is not None and qp.remote_addr == src and qp.state is QpState.INIT:
                self._cm_responder_ready(qp, now)

    def _cm_responder_ready(self, qp, now):
        qp.modify(QpState.READY)
        c = self._cm[qp.qp_id]
        c["state"] = "connected"
        if isinstance(self.listening, MemoryRegion):
            qp.post([WorkRequest(0, "SEND", self.listening.describe())])

    def cm_state(self, qp):
        c = self._cm.get(qp.qp_id)
        return c["state"] if c else None


class Fabric:
    """Event-driven scheduler stepping every endpoint on a shared channel."""

    def __init__(self, channel=None):
        self.channel = channel if channel is not None else SimChannel()
        self.endpoints = []

    @property
    def now(self):
        return self.channel.now()

    def add_endpoint(self, name, **kw):
        ep = Endpoint(self.channel, name, **kw)
        self.endpoints.append(ep)
        return ep

    def next_time(self):
        if any(ep.has_work() for ep in self.endpoints):
            return self.now
        t = self.channel.next_event_time()
        for ep in self.endpoints:
            t = min(t, ep.next_deadline())
        return t

    def step(self, limit=math.inf):
        """Advance to the next event (not past ``limit``) and run all engines.
        Returns False when nothing is scheduled before ``limit``."""
        t = self.next_time()
        if t > limit:
            if math.isfinite(limit):
                self.channel.advance(max(limit, self.now))
            return False
        self.channel.advance(max(t, self.now))
        now = self.now
        for ep in self.endpoints:
            ep.engine_step(now)
        return True

    def run_until(self, predicate, timeout=1.0):
        """Step until ``predicate()`` holds; ``timeout`` is in channel time."""
        end = self.now + timeout
        while not predicate():
            if not self.step(end):
                return predicate()
        return True

    def idle(self, seconds):
        """Let ``seconds`` of channel time pass, servicing events."""
        end = self.now + seconds
        while self.step(end):
            pass


def cm_handshake(fabric, initiator, responder, mr=None, timeout=None):
    """Connect ``initiator`` to ``responder`` over the datagram path.

    ``responder`` advertises ``mr`` (if given) with a SEND once the connection
    is up. Returns ``(initiator_qp, responder_qp)``; the initiator's QP holds
    the advertised region in ``remote_mr``. Raises :class:`CmError` when the
    retries run out.
    """
    if mr is not None:
        responder.listen(mr)
    elif responder.listening is None:
        responder.listen()
    qp = initiator.connect(responder.addr, fabric.now, expect_mr=mr is not None)
    c = initiator._cm[qp.qp_id]
    limit = timeout if timeout is not None else initiator.cm_timeout * (initiator.cm_retries + 2)
    ok = fabric.run_until(lambda: c["state"] in ("connected", "failed"), limit)
    if not ok or c["state"] == "failed":
        qp.modify(QpState.ERROR)
        raise CmError(f"connection to endpoint {responder.name!r} timed out after {c['tries']} retries")
    rqp = _responder_qp(responder, initiator, qp)
    if mr is not None:
        # collect the responder's completion for the advertisement
        fabric.run_until(lambda: rqp.outstanding == 0, limit)
        rqp.poll_cq()
    return qp, rqp


def _responder_qp(responder, initiator, qp):
    qid = responder._peers.get((initiator.addr, qp.qp_id))
    return responder.qps.get(qid) if qid is not None else None


def register_memory(endpoint, buffer):
    return endpoint.register_memory(buffer)


def engine_step(endpoint, now):
    return endpoint.engine_step(now)


def connect_pair(model=None, remote_size=1 << 20, trace=False, **kw):
    """Convenience: fabric with a connected initiator/responder pair and a
    registered remote buffer. Returns ``(fabric, qp, remote_mr)``."""
    fabric = Fabric(SimChannel(model, trace=trace))
    a = fabric.add_endpoint("fpga", **kw)
    b = fabric.add_endpoint("host", **kw)
    mr = b.register_memory(np.zeros(remote_size, dtype=np.uint8))
    qp, _ = cm_handshake(fabric, a, b, mr)
    return fabric, qp, mr
