"""Software RDMA transport: verbs objects, RC protocol engine, channels."""

from .bench import BenchResult, bench_grid, throughput_bench, write_bench_csv
from .channel import ChannelModel, SimChannel, UdpChannel
from .engine import (
    EngineStats,
    Endpoint,
    Fabric,
    cm_handshake,
    connect_pair,
    engine_step,
    register_memory,
)
from .verbs import (
    CmError,
    Completion,
    MemoryRegion,
    QpKind,
    QpState,
    QpStateError,
    QueuePair,
    RdmaError,
    WcStatus,
    WorkRequest,
    poll_cq,
    post_batch,
)
from .wire import HEADER_SIZE, Op, Packet, read_trace, write_trace
