"""Configuration dataclasses and the key-value config file format.

A config file is plain text, one ``key = value`` per line, ``#`` comments.
Keys are dotted paths into the experiment config, e.g.::

    seed = 7
    tasks = 16
    device.read_latency_ns = 17712
    queues.pairs_per_device = 8
    cache.lines = 512
    share_table.enabled = true
    ctc_points = 0,0.5,1,2

``device.*`` keys describe the geometry shared by all devices; the device
count itself comes from ``num_devices`` (or the experiment's default).
A config plus a seed reproduces a run exactly; ``config_text`` serializes
the resolved values back out for the record.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass


@dataclass
class DeviceSpec:
    """One simulated SSD.

    The default service times are calibrated so a saturated device moves
    4 KiB blocks at roughly 3.7 GB/s reading and 2.2 GB/s writing
    (parallelism * block_size / latency).
    """

    num_blocks: int = 1 << 16
    block_size: int = 4096
    read_latency_ns: int = 17712
    write_latency_ns: int = 29789
    parallelism: int = 16
    jitter: str = "none"            # none | uniform | exponential
    jitter_ns: int = 0
    per_channel_rate: float = 0.0   # commands/sec; 0 couples occupancy to latency


@dataclass
class QueueSpec:
    """Full-scale geometry mirrors a consumer NVMe controller: 128 queue
    pairs, 256 entries deep.  Benchmarks scale the pair count down."""

    pairs_per_device: int = 128
    sq_depth: int = 256
    cq_depth: int = 256


@dataclass
class CacheSpec:
    """Line count may be given directly or derived from a byte budget;
    a non-zero ``bytes`` wins and is divided by the device block size."""

    lines: int = 512
    bytes: int = 0
    policy: str = "clock"           # clock | modulo
    busy_choice: str = "wait"       # wait | find_another

    def resolved_lines(self, block_size: int) -> int:
        if self.bytes:
            return max(1, self.bytes // block_size)
        return self.lines


@dataclass
class ShareTableSpec:
    enabled: bool = False
    buckets: int = 256


@dataclass
class ServiceSpec:
    warps: int = 4
    poll_ns: int = 400
    idle_max_ns: int = 3200


@dataclass
class TimingSpec:
    """Host-side costs; pure configuration inputs, not derived quantities."""

    cmd_write_ns: int = 150         # gap between reserving an SQE and UPDATED
    doorbell_publish_ns: int = 200  # MMIO write while holding the doorbell lock
    fetch_ns: int = 300             # doorbell observed -> device starts fetching


@dataclass
class SystemConfig:
    seed: int = 0
    num_devices: int = 1
    device: DeviceSpec = field(default_factory=DeviceSpec)
    queues: QueueSpec = field(default_factory=QueueSpec)
    cache: CacheSpec = field(default_factory=CacheSpec)
    share_table: ShareTableSpec = field(default_factory=ShareTableSpec)
    service: ServiceSpec = field(default_factory=ServiceSpec)
    timing: TimingSpec = field(default_factory=TimingSpec)
    debug_locks: bool = True
    random_ties: bool = False
    livelock_budget: int = 5_000_000


EXPERIMENTS = ("ctc_sweep", "rand_read", "rand_write", "deadlock_demo",
               "queue_sweep", "cache_sweep")


@dataclass
class ExperimentConfig:
    """One benchmark run: system geometry plus workload knobs."""

    experiment: str = "rand_read"
    system: SystemConfig = field(default_factory=SystemConfig)

    # shared workload knobs
    tasks: int = 16
    epochs: int = 16
    reads_per_task: int = 8

    # ctc_sweep
    ctc_points: tuple = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0, 1.5, 2.0)

    # rand_read / rand_write
    concurrency_points: tuple = (1, 2, 4, 8, 16, 32, 64, 128)
    warmup_ns: int = 1_000_000
    measure_ns: int = 3_000_000

    # deadlock_demo
    mode: str = "both"              # naive | agile | both
    demo_tasks: int = 4
    demo_sq_depth: int = 2
    demo_limit_ns: int = 50_000_000

    # queue_sweep / cache_sweep (synthetic gather workload)
    gathers_per_epoch: int = 8
    compute_ns_per_gather: int = 25_000
    block_pool: int = 1 << 16
    queue_pair_points: tuple = (1, 2, 4, 8, 16)
    cache_line_points: tuple = (64, 128, 512, 1024, 2048)

    @property
    def seed(self) -> int:
        return self.system.seed


# ----------------------------------------------------------- file handling

def parse_config_file(path) -> dict[str, str]:
    overrides: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            overrides[key.strip()] = value.strip()
    return overrides


def _cast(current, text: str):
    if isinstance(current, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        if current and isinstance(current[0], float):
            return tuple(float(p) for p in parts)
        return tuple(int(p) for p in parts)
    if isinstance(current, str):
        return text
    raise ValueError(f"cannot override value of type {type(current).__name__}")


_SYSTEM_SECTIONS = ("device", "queues", "cache", "share_table", "service", "timing")


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    for key, text in overrides.items():
        head, _, rest = key.partition(".")
        if head in _SYSTEM_SECTIONS:
            section = getattr(cfg.system, head)
            if not hasattr(section, rest):
                raise KeyError(f"unknown config key: {key}")
            setattr(section, rest, _cast(getattr(section, rest), text))
        elif head in ("seed", "num_devices", "debug_locks", "random_ties",
                      "livelock_budget"):
            setattr(cfg.system, head, _cast(getattr(cfg.system, head), text))
        elif hasattr(cfg, head) and not rest:
            setattr(cfg, head, _cast(getattr(cfg, head), text))
        else:
            raise KeyError(f"unknown config key: {key}")
    return cfg


def _flatten(prefix: str, obj) -> list[tuple[str, object]]:
    out = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if is_dataclass(value):
            out.extend(_flatten(f"{name}.", value))
        else:
            out.append((name, value))
    return out


def config_text(cfg: ExperimentConfig) -> str:
    """Serialize the resolved config; identical text => identical run."""
    pairs = [("experiment", cfg.experiment)]
    pairs += [(k, v) for k, v in _flatten("", cfg) if k not in ("experiment",)]
    lines = []
    for key, value in pairs:
        key = key.replace("system.", "")
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
