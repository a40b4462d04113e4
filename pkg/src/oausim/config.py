"""Run configuration: TOML schema, defaults and cross-field validation.

Every section is optional; defaults reproduce the validation setup
(80 MSPS, 16 real channels on two 8-channel links padded to 256 payload
channels, 60-cycle trigger delay, 256 KiB blocks, batches of 8 WRITEs)::

    mode = "acquire_us"        # acquire_us | acquire_oa | stress | characterize | budget
    seed = 0
    output = "run"

    [afe]         channels, sample_rate, gain_db, noise_rms, active_termination
    [scenario]    any SignalScenario field (kind, amplitude, echoes, ...)
    [link]        links, octets_per_frame, frames_per_multiframe, scrambling,
                  elastic_depth, cgs_frames, sysref_phase, skews
    [trigger]     source, delay, window, first_event, period, frames
    [acquisition] payload_channels, block_size, capacity, chunk_samples, dummy_value
    [transport]   mtu, loss_probability, one_way_delay, bandwidth, reorder, batch
    [processing]  f_lo, f_hi, sound_speed
    [stress]      payloads, batches, repeats, iterations, poll_overhead
    [characterize] sample_rate, record_length, amplitude, f_lo, f_hi, order,
                  step, noise_rms
    [budget]      channels, bits, fs, buffer_bytes, r_out, tau_s, frame_len

Flag overrides use dotted keys (``trigger.delay=80``) with TOML literal values.
"""

import copy
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .acquisition.budget import MIB, REFERENCE_TAU_S

MODES = ("acquire_us", "acquire_oa", "stress", "characterize", "budget")


class ConfigError(ValueError):
    pass


@dataclass
class AfeSection:
    channels: int = 16
    sample_rate: float = 80e6
    gain_db: float = 0.0
    noise_rms: float = 2.0
    active_termination: bool = True


@dataclass
class LinkSection:
    links: int = 2
    octets_per_frame: int = 16
    frames_per_multiframe: int = 32
    scrambling: bool = False
    elastic_depth: int = None
    cgs_frames: int = 32
    sysref_phase: int = 0
    skews: list = field(default_factory=lambda: [0, 0])


@dataclass
class TriggerSection:
    source: str = None  # default follows the mode
    delay: int = 60
    window: int = 3072
    first_event: float = 3.2e-6
    period: float = 100e-6
    frames: int = 1


@dataclass
class AcquisitionSection:
    payload_channels: int = 256
    block_size: int = 256 * 1024
    capacity: int = 4 * MIB
    chunk_samples: int = 1024
    dummy_value: int = 0


@dataclass
class TransportSection:
    mtu: int = 4096
    loss_probability: float = 0.0
    one_way_delay: float = 1e-6
    bandwidth: float = 100e9
    reorder: bool = False
    batch: int = 8


@dataclass
class ProcessingSection:
    f_lo: float = 1e6
    f_hi: float = 10e6
    sound_speed: float = 1540.0


@dataclass
class StressSection:
    payloads: list = field(default_factory=lambda: [65536, 131072, 262144, 524288, 1048576])
    batches: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    repeats: int = 10
    iterations: int = 3
    poll_overhead: float = 5e-6


@dataclass
class CharacterizeSection:
    sample_rate: float = 125e6
    record_length: int = 32768
    amplitude: float = 16000.0
    f_lo: float = 1e6
    f_hi: float = 46e6
    order: int = 1
    step: float = 0.2e6
    start: float = 0.2e6
    noise_rms: float = 1.0
    flat: bool = False


@dataclass
class BudgetSection:
    channels: list = field(default_factory=lambda: [16, 64, 128, 256])
    bits: list = field(default_factory=lambda: [16])
    fs: list = field(default_factory=lambda: [40e6, 80e6, 125e6])
    buffer_bytes: list = field(default_factory=lambda: [4 * MIB])
    r_out: list = field(default_factory=lambda: [95.6e9])
    tau_s: list = field(default_factory=lambda: [REFERENCE_TAU_S])
    frame_len: list = field(default_factory=lambda: [2000])


def _default_scenario(mode):
    if mode == "acquire_oa":
        return dict(kind="oa_pulse", amplitude=4000.0, oa_delay=10e-6, oa_width=100e-9, channels=[4, 5, 6, 7])
    return dict(kind="pulse_echo", amplitude=8000.0, echoes=[[0.02, 1.0]], center_frequency=5e6, cycles=3.0)


_SECTIONS = dict(
    afe=AfeSection,
    link=LinkSection,
    trigger=TriggerSection,
    acquisition=AcquisitionSection,
    transport=TransportSection,
    processing=ProcessingSection,
    stress=StressSection,
    characterize=CharacterizeSection,
    budget=BudgetSection,
)


@dataclass
class RunConfig:
    mode: str = "acquire_us"
    seed: int = 0
    output: str = "run"
    scenario: dict = None
    afe: AfeSection = field(default_factory=AfeSection)
    link: LinkSection = field(default_factory=LinkSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    acquisition: AcquisitionSection = field(default_factory=AcquisitionSection)
    transport: TransportSection = field(default_factory=TransportSection)
    processing: ProcessingSection = field(default_factory=ProcessingSection)
    stress: StressSection = field(default_factory=StressSection)
    characterize: CharacterizeSection = field(default_factory=CharacterizeSection)
    budget: BudgetSection = field(default_factory=BudgetSection)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kw = {}
        for key, val in d.items():
            sec = _SECTIONS.get(key)
            if sec is not None:
                if not isinstance(val, dict):
                    raise ConfigError(f"[{key}] must be a table")
                bad = set(val) - {f.name for f in fields(sec)}
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                try:
                    kw[key] = sec(**val)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"[{key}]: {e}") from e
            else:
                kw[key] = val
        cfg = cls(**kw)
        if cfg.scenario is None:
            cfg.scenario = _default_scenario(cfg.mode)
        if cfg.trigger.source is None:
            cfg.trigger.source = "external" if cfg.mode == "acquire_oa" else "internal_pulser"
        return cfg

    @classmethod
    def load(cls, path=None, overrides=(), mode=None):
        data = {}
        if path is not None:
            try:
                with open(path, "rb") as fh:
                    data = tomllib.load(fh)
            except (OSError, tomllib.TOMLDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
        for item in overrides:
            apply_override(data, item)
        if mode is not None:
            data["mode"] = mode
        cfg = cls.from_dict(data)
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        a, l, t, q, x = self.afe, self.link, self.trigger, self.acquisition, self.transport
        if self.mode in ("acquire_us", "acquire_oa"):
            per_link = l.octets_per_frame // 2
            if l.octets_per_frame % 2 or per_link * l.links != a.channels:
                raise ConfigError(f"{l.links} links x {per_link} channels do not carry {a.channels} AFE channels")
            if len(l.skews) != l.links:
                raise ConfigError("link.skews needs one entry per link")
            if q.payload_channels < a.channels:
                raise ConfigError("payload_channels must be >= afe.channels")
            if q.block_size <= 0 or q.block_size & (q.block_size - 1):
                raise ConfigError("block_size must be a power of two")
            if q.capacity % q.block_size:
                raise ConfigError("capacity must be a multiple of block_size")
            frame_bytes = t.window * q.payload_channels * 2
            if frame_bytes > q.capacity:
                raise ConfigError(f"a {frame_bytes}-byte frame does not fit the {q.capacity}-byte ring")
            if t.frames < 1 or t.window <= 0 or t.delay < 0:
                raise ConfigError("trigger needs frames >= 1, window > 0, delay >= 0")
            if t.frames > 1 and t.period * a.sample_rate < t.delay + t.window:
                raise ConfigError("trigger period shorter than delay + window; frames would overlap")
            if x.batch < 1:
                raise ConfigError("transport.batch must be >= 1")
            if not 0 < self.processing.f_lo < self.processing.f_hi < a.sample_rate / 2:
                raise ConfigError("processing band must satisfy 0 < f_lo < f_hi < fs/2")
        if self.mode == "characterize":
            c = self.characterize
            if not 0 < c.f_lo < c.f_hi < c.sample_rate / 2 and not c.flat:
                raise ConfigError("characterize shaping corners must satisfy 0 < f_lo < f_hi < fs/2")
        if not 0 <= self.transport.loss_probability < 1:
            raise ConfigError("transport.loss_probability must be in [0, 1)")


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data, item):
    """Apply ``section.key=value`` to a nested dict."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends into a non-table")
    node[parts[-1]] = _parse_value(text.strip())
