"""Simulation of a multi-channel ultrasound/optoacoustic receive chain:
front end, serial link, triggered acquisition, RDMA transport and analysis."""

from ._accel import USE_NUMBA, backend_name
from .samples import SampleBlock, concat_blocks

__version__ = "0.1.0"
