"""Trigger windowing, ring buffering and the capacity model."""

from .budget import (
    MIB,
    REFERENCE_TAU_S,
    REFERENCE_TAU_S_DECIMAL,
    CapacityError,
    LeakyBucketModel,
    OccupancyResult,
    budget_row,
    budget_table,
    max_fps,
    max_frame_bits,
    max_frame_length,
    oracle_max_frame_length,
    simulate_occupancy,
    write_budget_csv,
)
from .ringbuffer import BlockGenerator, RingBuffer, RingOverflow, RingSequenceError, ring_read, ring_write
from .trigger import (
    EventBus,
    FrameEvent,
    FrameWindower,
    TriggerBusy,
    TriggerConfig,
    block_count,
    latch_trigger,
    latch_triggers,
    window_frame,
)
