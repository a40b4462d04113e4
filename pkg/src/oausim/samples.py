from dataclasses import dataclass

import numpy as np


@dataclass
class SampleBlock:
    """Channel-major int16 samples, ``data.shape == (channels, n)``.

    ``start_index`` counts sample-clock cycles, so consecutive blocks of a
    continuous stream satisfy ``b.start_index == a.start_index + a.n``.
    """

    data: np.ndarray
    start_index: int = 0
    sample_rate: float = 80e6

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise ValueError("SampleBlock data must be 2-D (channels, samples)")
        self.data = data

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def n(self):
        return self.data.shape[1]

    @property
    def end_index(self):
        return self.start_index + self.n

    def slice(self, start, stop):
        """Samples with absolute indices in ``[start, stop)``."""
        lo = max(start, self.start_index) - self.start_index
        hi = min(stop, self.end_index) - self.start_index
        hi = max(hi, lo)
        return SampleBlock(self.data[:, lo:hi], self.start_index + lo, self.sample_rate)


def concat_blocks(blocks):
    """Join contiguous blocks; raises if the stream has a gap."""
    blocks = [b for b in blocks if b.n]
    if not blocks:
        raise ValueError("no samples")
    for a, b in zip(blocks, blocks[1:]):
        if b.start_index != a.end_index:
            raise ValueError(f"stream discontinuity at {a.end_index} (next block starts {b.start_index})")
    data = np.concatenate([b.data for b in blocks], axis=1)
    return SampleBlock(data, blocks[0].start_index, blocks[0].sample_rate)
