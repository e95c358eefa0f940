import pytest

from agile_sim.config import SystemConfig
from agile_sim.sim_core import TraceRecorder
from agile_sim.system import AgileSystem


def run_now(gen):
    """Exhaust a generator that is not expected to yield; return its value."""
    try:
        step = next(gen)
    except StopIteration as stop:
        return stop.value
    raise AssertionError(f"generator yielded {step!r} but was expected not to")


def small_config(**kw) -> SystemConfig:
    """Desk-scale geometry: one device, two queue pairs, small cache."""
    cfg = SystemConfig()
    cfg.num_devices = kw.pop("num_devices", 1)
    cfg.queues.pairs_per_device = kw.pop("pairs", 2)
    cfg.queues.sq_depth = kw.pop("sq_depth", 64)
    cfg.queues.cq_depth = kw.pop("cq_depth", 64)
    cfg.cache.lines = kw.pop("cache_lines", 64)
    cfg.device.num_blocks = kw.pop("blocks", 4096)
    cfg.service.warps = kw.pop("warps", 2)
    cfg.seed = kw.pop("seed", 0)
    if kw.pop("share_table", False):
        cfg.share_table.enabled = True
    for key, value in kw.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def recorded_system():
    def make(**kw) -> AgileSystem:
        return AgileSystem(small_config(**kw), recorder=TraceRecorder())
    return make
