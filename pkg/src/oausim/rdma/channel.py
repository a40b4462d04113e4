"""Datagram channels between endpoints.

:class:`SimChannel` runs in virtual time: each direction serialises packets
at ``bandwidth``, adds ``one_way_delay``, and may drop, delay (reorder) or
duplicate packets from a seeded generator. :class:`UdpChannel` carries the
same datagrams over real sockets. Both expose ``attach``, ``send``,
``receive``, ``next_event_time`` and ``now``.
"""

import heapq
import math
import select
import socket
import time
from dataclasses import dataclass

import numpy as np

from .wire import TRACE_DELIVERED, TRACE_DROPPED, TRACE_SENT, TraceRecord


@dataclass
class ChannelModel:
    mtu: int = 4096
    loss_probability: float = 0.0
    one_way_delay: float = 1e-6
    bandwidth: float = 100e9
    reorder: bool = False
    reorder_probability: float = 0.1
    reorder_delay: float = 5e-6
    duplicate_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        # loss 1.0 is allowed so a dead link can be modelled
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be in [0, 1]")
        if self.mtu < 64:
            raise ValueError("mtu must be >= 64 bytes")
        if self.bandwidth <= 0 or self.one_way_delay < 0:
            raise ValueError("bandwidth must be > 0 and delay >= 0")
        if not 0.0 <= self.duplicate_probability <= 1.0 or not 0.0 <= self.reorder_probability <= 1.0:
            raise ValueError("probabilities must be in [0, 1]")


class SimChannel:
    """Deterministic in-process channel in virtual time."""

    def __init__(self, model=None, trace=False):
        self.model = model or ChannelModel()
        self._rng = np.random.default_rng(self.model.seed)
        self._heaps = {}  # dst -> [(arrival, seq, src, data)]
        self._seq = 0
        self._busy = {}
        self._now = 0.0
        self.addresses = {}
        self.sent = 0
        self.dropped = 0
        self.duplicated = 0
        self.trace = [] if trace else None

    def now(self):
        return self._now

    def advance(self, t):
        if t < self._now:
            raise ValueError("time must be monotonic")
        self._now = t

    def attach(self, name):
        addr = len(self.addresses)
        self.addresses[name] = addr
        self._heaps[addr] = []
        return addr

    def _rec(self, ev, src, dst, data):
        if self.trace is not None:
            self.trace.append(TraceRecord(self._now, ev, src, dst, bytes(data)))

    def send(self, src, dst, data):
        m = self.model
        self.sent += 1
        self._rec(TRACE_SENT, src, dst, data)
        key = (src, dst)
        depart = max(self._now, self._busy.get(key, 0.0)) + len(data) * 8.0 / m.bandwidth
        self._busy[key] = depart
        if m.loss_probability > 0 and self._rng.random() < m.loss_probability:
            self.dropped += 1
            self._rec(TRACE_DROPPED, src, dst, data)
            return
        copies = 1
        if m.duplicate_probability > 0 and self._rng.random() < m.duplicate_probability:
            copies = 2
            self.duplicated += 1
        for _ in range(copies):
            arrive = depart + m.one_way_delay
            if m.reorder and self._rng.random() < m.reorder_probability:
                arrive += self._rng.uniform(0.0, m.reorder_delay)
            heap = self._heaps.get(dst)
            if heap is None:
                # nobody attached at this address
                self.dropped += 1
                self._rec(TRACE_DROPPED, src, dst, data)
                return
            heapq.heappush(heap, (arrive, self._seq, src, data))
            self._seq += 1

    def receive(self, addr):
        """Datagrams for ``addr`` that have arrived by now, in arrival order."""
        heap = self._heaps[addr]
        out = []
        while heap and heap[0][0] <= self._now:
            _, _, src, data = heapq.heappop(heap)
            out.append((src, data))
            self._rec(TRACE_DELIVERED, src, addr, data)
        return out

    def next_event_time(self):
        return min((h[0][0] for h in self._heaps.values() if h), default=math.inf)

    def idle(self, seconds):
        self.advance(self._now + seconds)


class UdpChannel:
    """Same interface over UDP sockets in wall-clock time.

    ``peers`` maps endpoint names to ``(host, port)``; names attached locally
    get a bound socket, the rest are remote. Optional seeded loss is applied
    on send for testing.
    """

    def __init__(self, peers, model=None, trace=False):
        self.model = model or ChannelModel()
        self.peers = dict(peers)
        self._names = list(self.peers)
        self.addresses = {}
        self._socks = {}
        self._rng = np.random.default_rng(self.model.seed)
        self._t0 = time.monotonic()
        self.sent = 0
        self.dropped = 0
        self.trace = [] if trace else None

    def now(self):
        return time.monotonic() - self._t0

    def advance(self, t):
        delay = t - self.now()
        socks = list(self._socks.values())
        if delay > 0 and socks:
            select.select(socks, [], [], min(delay, 0.05))

    def attach(self, name):
        addr = self._names.index(name)
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.bind(self.peers[name])
        s.setblocking(False)
        self.peers[name] = s.getsockname()
        self._socks[addr] = s
        self.addresses[name] = addr
        return addr

    def _rec(self, ev, src, dst, data):
        if self.trace is not None:
            self.trace.append(TraceRecord(self.now(), ev, src, dst, bytes(data)))

    def send(self, src, dst, data):
        self.sent += 1
        self._rec(TRACE_SENT, src, dst, data)
        if self.model.loss_probability > 0 and self._rng.random() < self.model.loss_probability:
            self.dropped += 1
            self._rec(TRACE_DROPPED, src, dst, data)
            return
        self._socks[src].sendto(bytes(data), self.peers[self._names[dst]])

    def receive(self, addr):
        s = self._socks[addr]
        back = {v: k for k, v in ((n, tuple(self.peers[n])) for n in self._names)}
        out = []
        while True:
            try:
                data, frm = s.recvfrom(65536)
            except BlockingIOError:
                break
            name = back.get(frm)
            src = self._names.index(name) if name is not None else -1
            self._rec(TRACE_DELIVERED, src, addr, data)
            out.append((src, data))
        return out

    def next_event_time(self):
        # unknown for real sockets; poll soon
        return self.now() + 1e-4

    def idle(self, seconds):
        time.sleep(seconds)

    def close(self):
        for s in self._socks.values():
            s.close()
