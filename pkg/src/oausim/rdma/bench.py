"""Single-frame throughput benchmark.

One frame is ``batch`` WRITEs of ``payload`` bytes each. The host loop posts
a batch, waits for all its completions, pays a fixed completion-detection
cost (``poll_overhead``) plus ``post_overhead`` per request, and reposts.
Goodput is payload bytes delivered over channel time.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelModel, SimChannel
from .engine import Fabric, cm_handshake
from .verbs import WcStatus, WorkRequest

PAYLOADS = tuple(k * 1024 for k in (64, 128, 256, 512, 1024))
BATCHES = (1, 2, 4, 8, 16)


@dataclass
class BenchResult:
    payload: int
    batch: int
    runs: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.runs))

    @property
    def spread(self):
        return float(np.max(self.runs) - np.min(self.runs)) if self.runs else 0.0

    @property
    def std(self):
        return float(np.std(self.runs))


def _one_run(payload, batch, model, iterations, poll_overhead, post_overhead, seed, window):
    fabric = Fabric(SimChannel(model))
    a = fabric.add_endpoint("fpga", seed=seed, window=window)
    b = fabric.add_endpoint("host", seed=seed, window=window)
    remote = b.register_memory(np.zeros(payload * batch, dtype=np.uint8))
    qp, _ = cm_handshake(fabric, a, b, remote)
    src = np.random.default_rng(seed).integers(0, 256, payload * batch, dtype=np.uint8)
    wrs = [WorkRequest(i, "WRITE", src[i * payload : (i + 1) * payload], i * payload) for i in range(batch)]
    t0 = fabric.now
    moved = 0
    for _ in range(iterations):
        fabric.idle(post_overhead * batch)
        if qp.post(wrs) != batch:
            raise RuntimeError("send queue rejected part of the batch")
        fabric.run_until(lambda: len(qp.cq) >= batch, timeout=1.0)
        done = qp.poll_cq()
        if len(done) != batch or any(c.status is not WcStatus.SUCCESS for c in done):
            raise RuntimeError("benchmark batch did not complete cleanly")
        moved += payload * batch
        fabric.idle(poll_overhead)
    elapsed = fabric.now - t0
    if not np.array_equal(remote.buffer, src):
        raise RuntimeError("remote buffer differs from source")
    return moved * 8 / elapsed / 1e9


def throughput_bench(payload, batch, model=None, repeats=10, iterations=3, poll_overhead=5e-6, post_overhead=0.0, seed=0, window=64):
    """Mean goodput in Gb/s over ``repeats`` runs of the single-frame loop."""
    if not 1 <= batch:
        raise ValueError("batch must be >= 1")
    if payload <= 0:
        raise ValueError("payload must be positive")
    model = model or ChannelModel()
    res = BenchResult(payload, batch)
    for r in range(repeats):
        res.runs.append(_one_run(payload, batch, model, iterations, poll_overhead, post_overhead, seed + r, window))
    return res


def bench_grid(payloads=PAYLOADS, batches=BATCHES, **kw):
    return [throughput_bench(p, b, **kw) for p in payloads for b in batches]


def write_bench_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["payload", "batch", "run", "gbps"])
        for res in results:
            for i, g in enumerate(res.runs):
                w.writerow([res.payload, res.batch, i, f"{g:.6f}"])
