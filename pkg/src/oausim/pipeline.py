"""End-to-end workflows behind the command line.

``acquire`` runs five concurrent stages joined by bounded queues::

    producer (AFE) -> link (TX, lane skew, RX, link alignment)
      -> acquisition (padding, trigger windowing, ring buffer)
      -> transport (RDMA WRITE batches into the host region) -> host checks

Each stage records its first exception; the orchestrator stops the others and
re-raises it as a :class:`StageError` naming the stage.
"""

import hashlib
import json
import logging
import os
import queue
import threading

import numpy as np

from . import afe as afe_mod
from . import analysis
from .acquisition import budget as bud
from .acquisition.ringbuffer import BlockGenerator, RingBuffer, RingOverflow
from .acquisition.trigger import EventBus, FrameEvent, FrameWindower, TriggerBusy, TriggerConfig, latch_trigger
from .jesd import kernels
from .jesd.codec import K28_5
from .jesd.link import LaneStream, LinkError, LinkParams, LinkReceiver, LinkTransmitter, rx_link, tx_link
from .rdma import bench
from .rdma.channel import ChannelModel, SimChannel
from .rdma.engine import Fabric, cm_handshake
from .rdma.verbs import WcStatus, WorkRequest
from .samples import SampleBlock, concat_blocks

log = logging.getLogger(__name__)

STAGES = ("config", "afe", "link", "acquisition", "transport", "analysis", "output")
_DONE = object()


class StageError(RuntimeError):
    def __init__(self, stage, error):
        super().__init__(f"{stage} stage failed: {error}")
        self.stage = stage
        self.error = error


def _layout(out):
    for sub in ("frames", "csv", "images"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)


def _write_report(out, report):
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


class _Stages:
    """Thread bookkeeping: first error wins and stops everyone."""

    def __init__(self):
        self.stop = threading.Event()
        self.error = None
        self._lock = threading.Lock()
        self.threads = []

    def spawn(self, name, fn, *args):
        def run():
            try:
                fn(*args)
            except BaseException as e:  # noqa: BLE001 - reported with stage name
                with self._lock:
                    if self.error is None:
                        self.error = StageError(name, e)
                self.stop.set()

        t = threading.Thread(target=run, name=name, daemon=True)
        self.threads.append(t)
        t.start()

    def put(self, q, item):
        while not self.stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return
            except queue.Full:
                continue
        raise _Stopped()

    def get(self, q):
        while not self.stop.is_set():
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                continue
        raise _Stopped()

    def join(self):
        for t in self.threads:
            t.join()
        if self.error is not None and not isinstance(self.error.error, _Stopped):
            raise self.error


class _Stopped(Exception):
    pass


class _SkewLine:
    """Delays one lane by ``skew`` octet ticks; the gap shows CGS commas."""

    def __init__(self, skew):
        self.skew = int(skew)
        rd0 = -1 if self.skew % 2 == 0 else 1
        self.carry, _ = kernels.encode_symbols(np.full(self.skew, K28_5, np.uint8), 1, rd0)
        self.ctrl = np.ones(self.skew, bool)

    def push(self, chunk):
        syms = np.concatenate((self.carry, chunk.symbols))
        ctrl = np.concatenate((self.ctrl, chunk.is_control))
        n = chunk.symbols.size
        self.carry, self.ctrl = syms[n:], ctrl[n:]
        return LaneStream(chunk.lane_id, syms[:n], ctrl[:n], chunk.start_tick)

    def flush(self, rd_end, top):
        pad, _ = kernels.encode_symbols(np.full(top - self.skew, K28_5, np.uint8), 1, rd_end)
        syms = np.concatenate((self.carry, pad))
        return syms


# ------------------------------------------------------------------ acquire


def _scenario(cfg, trigger_times, fs):
    sc = dict(cfg.scenario)
    sc.setdefault("seed", cfg.seed)
    if "pulse_times" not in sc:
        if cfg.mode == "acquire_us":
            # the pulser fires on the latched trigger edge
            sc["pulse_times"] = [float(latch_trigger(t, fs)) for t in trigger_times]
        else:
            # the laser fires at the (unquantised) external trigger instant
            sc["pulse_times"] = [t * fs for t in trigger_times]
    return afe_mod.SignalScenario.from_dict(sc)


def _link_params(cfg):
    l = cfg.link
    kw = dict(
        lanes=1,
        octets_per_frame=l.octets_per_frame,
        frames_per_multiframe=l.frames_per_multiframe,
        scrambling=l.scrambling,
        frame_clock=cfg.afe.sample_rate,
        cgs_frames=l.cgs_frames,
    )
    if l.elastic_depth is not None:
        kw["elastic_depth"] = l.elastic_depth
    return [LinkParams(device_id=i, **kw) for i in range(l.links)]


def _model_for(cfg):
    q, a, x = cfg.acquisition, cfg.afe, cfg.transport
    return bud.LeakyBucketModel.from_acquisition(q.payload_channels, 16, a.sample_rate, q.capacity, x.bandwidth, bud.REFERENCE_TAU_S)


def pad_channels(block, channels, value=0):
    """Append dummy channels holding ``value`` up to ``channels`` rows."""
    extra = channels - block.channels
    if extra < 0:
        raise ValueError("block already wider than the payload")
    if extra == 0:
        return block
    dummy = np.full((extra, block.n), value, dtype=block.data.dtype)
    return SampleBlock(np.vstack((block.data, dummy)), block.start_index, block.sample_rate)


def acquire(cfg, out=None):
    """Run an acquisition; returns the report dict (also written to disk)."""
    out = out or cfg.output
    _layout(out)
    a, t, q, x, l = cfg.afe, cfg.trigger, cfg.acquisition, cfg.transport, cfg.link
    fs = a.sample_rate
    tcfg = TriggerConfig(t.source, t.delay, t.window)
    trigger_times = [t.first_event + k * t.period for k in range(t.frames)]
    try:
        scenario = _scenario(cfg, trigger_times, fs)
        afe_cfg = afe_mod.AfeConfig(a.channels, "raw", fs, a.gain_db, a.active_termination, a.noise_rms)
    except (ValueError, TypeError) as e:
        raise StageError("afe", e) from e
    params = _link_params(cfg)
    per_link = params[0].channels
    trig_idx = [latch_trigger(tt, fs) for tt in trigger_times]
    total = max(trig_idx) + t.delay + t.window + 2 * per_link + q.chunk_samples

    ring = RingBuffer(q.capacity, q.block_size, trace=True)
    bus = EventBus()
    bus_q = bus.subscribe(64)
    windower = FrameWindower(tcfg, q.payload_channels, 16, q.block_size, bus)
    rejected = 0
    accepted = []
    for k in trig_idx:
        try:
            accepted.append((k, windower.trigger(k)))
        except TriggerBusy:
            rejected += 1
    events = [ev for _, ev in accepted]
    n_blocks = sum(ev.block_count for ev in events)
    gen = BlockGenerator(ring, bus)

    fabric = Fabric(SimChannel(ChannelModel(x.mtu, x.loss_probability, x.one_way_delay, x.bandwidth, x.reorder, seed=cfg.seed)))
    fpga = fabric.add_endpoint("fpga", seed=cfg.seed)
    host = fabric.add_endpoint("host", seed=cfg.seed)
    host_buf = np.zeros(max(n_blocks, 1) * q.block_size, dtype=np.uint8)
    try:
        mr = host.register_memory(host_buf)
        qp, _ = cm_handshake(fabric, fpga, host, mr)
    except Exception as e:
        raise StageError("transport", e) from e

    st = _Stages()
    q_link = queue.Queue(8)
    q_acq = queue.Queue(8)
    produced = []
    link_status = [None] * len(params)
    frame_digests = {}
    completions = []
    transport_stats = {}

    def producer():
        fe = afe_mod.FrontEnd(scenario, afe_cfg)
        for blk in fe.stream(total, q.chunk_samples):
            produced.append(blk)
            st.put(q_link, blk)
        st.put(q_link, _DONE)
        transport_stats["saturated_samples"] = fe.saturation_count

    def link_stage():
        txs = [LinkTransmitter(p, l.sysref_phase) for p in params]
        rxs = [LinkReceiver(p, l.sysref_phase) for p in params]
        lines = [_SkewLine(s) for s in l.skews]
        top = max(l.skews)
        pending = [[] for _ in params]
        emitted = [None]

        def drain(final=False):
            if any(not p for p in pending):
                return
            joined = [concat_blocks(p) for p in pending]
            start = max(b.start_index for b in joined) if emitted[0] is None else emitted[0]
            end = min(b.end_index for b in joined)
            if end <= start:
                return
            parts = [b.slice(start, end) for b in joined]
            st.put(q_acq, SampleBlock(np.vstack([p.data for p in parts]), start, fs))
            emitted[0] = end
            for i, b in enumerate(joined):
                pending[i] = [b.slice(end, b.end_index)] if b.end_index > end else []

        while True:
            blk = st.get(q_link)
            if blk is _DONE:
                break
            for i, (tx, rx, line) in enumerate(zip(txs, rxs, lines)):
                sub = SampleBlock(blk.data[i * per_link : (i + 1) * per_link], blk.start_index, fs)
                (chunk,) = tx.step(sub)
                try:
                    pending[i] += rx.step([line.push(chunk)])
                except LinkError as e:
                    raise LinkError(f"link {i}: {e}") from e
            drain()
        for i, (tx, rx, line) in enumerate(zip(txs, rxs, lines)):
            tail = line.flush(tx._rd[0], top)
            if tail.size:
                pending[i] += rx.step([LaneStream(0, tail, np.ones(tail.size, bool), rx.tick)])
            pending[i] += rx.finish()
            link_status[i] = rx.status
        drain()
        st.put(q_acq, _DONE)

    def acquisition_stage():
        while True:
            blk = st.get(q_acq)
            if blk is _DONE:
                break
            wide = pad_channels(blk, q.payload_channels, q.dummy_value)
            for frame, ev in windower.push(wide):
                frame_digests[ev.frame_id] = hashlib.sha256(BlockGenerator.frame_bytes(frame.data)).hexdigest()
                try:
                    gen.write_frame(frame.data, ev, wait=5.0)
                except RingOverflow as e:
                    model = _model_for(cfg)
                    raise RingOverflow(
                        f"{e}; leaky-bucket limit is {bud.max_frame_length(model)} samples/channel "
                        f"for this configuration (frame {t.window})"
                    ) from e
        bus.publish(_DONE)

    def transport_stage():
        batch = []
        wr_id = 0
        got = {}

        def flush():
            if not batch:
                return
            wrs = [w for w, _ in batch]
            if qp.post(wrs) != len(wrs):
                raise RuntimeError("send queue backpressure: batch not fully accepted")
            ok = fabric.run_until(lambda: len(qp.cq) >= len(wrs), timeout=1.0)
            done = qp.poll_cq()
            if not ok or len(done) != len(wrs):
                raise RuntimeError("RDMA batch did not complete")
            for c, (_, slot) in zip(done, batch):
                if c.status is not WcStatus.SUCCESS:
                    raise RuntimeError(f"WRITE {c.wr_id} completed with {c.status.value}")
                ring.release(slot)
            completions.extend(done)
            batch.clear()

        while True:
            item = st.get(bus_q)
            if item is _DONE:
                break
            if isinstance(item, FrameEvent):
                continue
            _, ev, i, slot = item
            off = (ev.first_block_index + i) * q.block_size
            batch.append((WorkRequest(wr_id, "WRITE", ring.block_view(slot), off), slot))
            wr_id += 1
            got[ev.frame_id] = got.get(ev.frame_id, 0) + 1
            if len(batch) >= x.batch or got[ev.frame_id] == ev.block_count:
                flush()
        flush()

    st.spawn("afe", producer)
    st.spawn("link", link_stage)
    st.spawn("acquisition", acquisition_stage)
    st.spawn("transport", transport_stage)
    st.join()

    # host side: check and process what landed in the registered region
    try:
        truth = concat_blocks(produced)
        frames_report = []
        for k, ev in accepted:
            fb = t.window * q.payload_channels * 2
            off = ev.first_block_index * q.block_size
            raw = host_buf[off : off + fb]
            host_frame = raw.view("<i2").reshape(t.window, q.payload_channels).T
            start = k + t.delay
            expect = pad_channels(truth.slice(start, start + t.window), q.payload_channels, q.dummy_value)
            afe_digest = hashlib.sha256(BlockGenerator.frame_bytes(expect.data)).hexdigest()
            host_digest = hashlib.sha256(raw.tobytes()).hexdigest()
            frame_block = SampleBlock(host_frame.astype(np.int16), start, fs)
            afe_mod.write_dump(os.path.join(out, "frames", f"frame_{ev.frame_id:03d}.afes"), frame_block)
            frames_report.append(
                dict(
                    frame_id=ev.frame_id,
                    trigger_sample_index=ev.trigger_sample_index,
                    first_sample_index=start,
                    blocks=ev.block_count,
                    sha256_host=host_digest,
                    sha256_generated=frame_digests.get(ev.frame_id),
                    sha256_afe=afe_digest,
                    match_generated=host_digest == frame_digests.get(ev.frame_id),
                    match_afe=host_digest == afe_digest,
                    frame=SampleBlock(host_frame[: a.channels].astype(np.int16), start, fs),
                    trigger_index=k,
                )
            )
    except Exception as e:
        raise StageError("acquisition", e) from e

    try:
        images = []
        p = cfg.processing
        for fr in frames_report:
            blk = fr.pop("frame")
            k = fr.pop("trigger_index")
            env = analysis.envelope(analysis.bandpass(blk, p.f_lo, p.f_hi))
            two_way = cfg.mode == "acquire_us"
            t0 = scenario.pulse_times[fr["frame_id"]] if scenario.pulse_times else k
            img = analysis.render_image(env, sound_speed=p.sound_speed, t0_samples=t0, two_way=two_way)
            stem = f"frame_{fr['frame_id']:03d}"
            analysis.write_pgm(os.path.join(out, "images", stem + ".pgm"), img)
            analysis.write_image_csv(os.path.join(out, "csv", stem + "_image.csv"), img)
            energy = (env.data**2).sum(axis=1)
            share = energy / energy.sum() if energy.sum() > 0 else energy
            ch, depth_k = img.brightest
            fr.update(
                brightest_channel=ch,
                brightest_depth_mm=float(img.depth_mm[depth_k]),
                channel_energy_fraction=[round(float(s), 6) for s in share],
            )
            images.append(img)
    except Exception as e:
        raise StageError("analysis", e) from e

    ring.dump_trace(os.path.join(out, "csv", "ring_trace.csv"))
    report = dict(
        mode=cfg.mode,
        seed=cfg.seed,
        stages=["afe", "link", "acquisition", "transport", "host", "analysis"],
        samples_generated=int(truth.n),
        link=[
            dict(
                latency_frames=s.latency_frames,
                lane_skew=s.lane_skew,
                symbol_errors=s.symbol_errors,
                data_start_index=s.data_start_index,
            )
            for s in link_status
        ],
        triggers=len(trig_idx),
        busy_rejections=rejected,
        frames=frames_report,
        blocks_written=ring.writes,
        overflows=ring.overflows,
        frames_dropped=gen.frames_dropped,
        rdma=dict(
            completions=len(completions),
            statuses=sorted({c.status.value for c in completions}),
            bytes_written=int(sum(c.byte_len for c in completions)),
            packets_sent=fpga.stats.packets_sent,
            retransmits=fpga.stats.retransmits,
            elapsed_sim_s=fabric.now,
        ),
        saturated_samples=transport_stats.get("saturated_samples", 0),
    )
    _write_report(out, report)
    return report


# ------------------------------------------------------------------- stress


def stress(cfg, out=None):
    out = out or cfg.output
    _layout(out)
    s, x = cfg.stress, cfg.transport
    model = ChannelModel(x.mtu, x.loss_probability, x.one_way_delay, x.bandwidth, x.reorder, seed=cfg.seed)
    try:
        results = bench.bench_grid(
            s.payloads, s.batches, model=model, repeats=s.repeats, iterations=s.iterations, poll_overhead=s.poll_overhead, seed=cfg.seed
        )
    except Exception as e:
        raise StageError("transport", e) from e
    bench.write_bench_csv(os.path.join(out, "csv", "stress.csv"), results)
    grid = {(r.payload, r.batch): r for r in results}
    with open(os.path.join(out, "csv", "stress_summary.csv"), "w") as fh:
        fh.write("payload,batch,mean_gbps,spread_gbps\n")
        for r in results:
            fh.write(f"{r.payload},{r.batch},{r.mean:.6f},{r.spread:.6f}\n")
    pay, bat = sorted(set(s.payloads)), sorted(set(s.batches))
    mono_p = all(grid[(pay[i], b)].mean <= grid[(pay[i + 1], b)].mean for b in bat for i in range(len(pay) - 1))
    mono_b = all(grid[(p, bat[i])].mean <= grid[(p, bat[i + 1])].mean for p in pay for i in range(len(bat) - 1))
    report = dict(
        mode="stress",
        seed=cfg.seed,
        points=len(results),
        repeats=s.repeats,
        monotone_in_payload=mono_p,
        monotone_in_batch=mono_b,
        max_spread_gbps=max(r.spread for r in results),
        best=dict(payload=results[-1].payload, batch=results[-1].batch, mean_gbps=results[-1].mean),
    )
    _write_report(out, report)
    return report


# ------------------------------------------------------------- characterize


def tone_record(f, c, seed, channel_gain=1.0):
    """One record at tone ``f`` through the front end and a one-lane link."""
    fs = c.sample_rate
    amp = c.amplitude * channel_gain
    sc = afe_mod.SignalScenario(kind="swept_sine", amplitude=amp, frequency=f, phase=0.5, seed=seed)
    cfg = afe_mod.AfeConfig(channels=1, sample_rate=fs, noise_rms=c.noise_rms)
    params = LinkParams(lanes=1, octets_per_frame=2, frames_per_multiframe=32, frame_clock=fs)
    blk = afe_mod.generate(sc, cfg, c.record_length)[0]
    blocks, status = rx_link(tx_link(blk, params), params)
    rec = concat_blocks(blocks)
    if rec.n < c.record_length:
        raise RuntimeError("link returned a short record")
    return analysis.SweepRecord(f, rec.data[0, : c.record_length], fs)


def characterize(cfg, out=None):
    out = out or cfg.output
    _layout(out)
    c = cfg.characterize
    grid = analysis.default_sweep_grid(c.sample_rate, c.step, c.start)
    try:
        gains = np.ones(grid.size) if c.flat else analysis.bandpass_response(grid, c.f_lo, c.f_hi, c.order)
        records = [tone_record(f, c, cfg.seed + i, g) for i, (f, g) in enumerate(zip(grid, gains))]
    except Exception as e:
        raise StageError("link", e) from e
    try:
        res = analysis.gain_curve(records)
        lo, hi = analysis.corners_3db(res)
        snrs = [(r.tone_frequency, analysis.snr_estimate(r)) for r in records if r.tone_frequency > 2e6]
    except Exception as e:
        raise StageError("analysis", e) from e
    analysis.write_gain_csv(os.path.join(out, "csv", "gain.csv"), res)
    analysis.write_snr_csv(os.path.join(out, "csv", "snr.csv"), snrs)
    inband = [r.snr_db for f, r in snrs if (lo is None or f >= lo) and (hi is None or f <= hi)]
    report = dict(
        mode="characterize",
        seed=cfg.seed,
        tones=len(records),
        f_peak=res.f_peak,
        f_lo=lo,
        f_hi=hi,
        expected_f_lo=None if c.flat else c.f_lo,
        expected_f_hi=None if c.flat else c.f_hi,
        min_inband_snr_db=min(inband) if inband else None,
    )
    _write_report(out, report)
    return report


# ------------------------------------------------------------------- budget


def budget(cfg, out=None):
    out = out or cfg.output
    _layout(out)
    b = cfg.budget
    rows = bud.budget_table(b.channels, b.bits, b.fs, b.buffer_bytes, b.r_out, b.tau_s, b.frame_len)
    bud.write_budget_csv(os.path.join(out, "csv", "budget.csv"), rows)
    ref = rows[0]
    report = dict(
        mode="budget",
        rows=len(rows),
        reference=dict(L_f_max=ref["L_f_max"], FPS_max=ref["FPS_max"], tau_s=ref["tau_s"]),
        reference_2000=dict(FPS=rows[1]["FPS"]),
        flagged=sum(1 for r in rows if r["status"] != "ok"),
    )
    _write_report(out, report)
    return report


def run(cfg, out=None):
    fn = dict(acquire_us=acquire, acquire_oa=acquire, stress=stress, characterize=characterize, budget=budget)[cfg.mode]
    return fn(cfg, out)
