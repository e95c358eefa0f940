"""4 KiB random read/write bandwidth versus in-flight count and device count.

Each requester keeps exactly one command outstanding, so the sweep's
concurrency point equals the in-flight population.  Consecutive requests
from one task walk the devices round-robin, interleaving traffic evenly,
and block addresses never repeat inside the measurement window so the
cache contributes no hits.  Bandwidth is sampled between two scheduled
checkpoints, excluding warmup and drain.
"""

from __future__ import annotations

import copy

from . import BenchResult
from ..sim_core import TraceRecorder
from ..system import AgileSystem


def _requester(system: AgileSystem, cfg, idx: int, conc: int, write: bool,
               end_ns: int):
    api = system.api
    d = len(system.devices)
    num_blocks = system.devices[0].store.num_blocks

    def fn(task, chain):
        buf = api.make_buf()
        if write:
            buf.data[:] = bytes([idx & 0xFF]) * system.block_size
        j = 0
        while system.sim.now < end_ns:
            dev = (idx + j) % d
            blk = (j * conc + idx) % num_blocks
            if write:
                barrier = yield from api.async_write(dev, blk, buf, chain)
                yield from api.wait(barrier, chain)
            else:
                yield from api.async_read(dev, blk, buf, chain)
                yield from api.wait(buf, chain)
            j += 1

    return fn


def _measure_point(cfg, conc: int, write: bool, trace: bool):
    system_cfg = copy.deepcopy(cfg.system)
    # keep every in-flight command on its own line, with headroom
    system_cfg.cache.lines = max(system_cfg.cache.lines, 4 * conc)
    recorder = TraceRecorder() if trace else None
    system = AgileSystem(system_cfg, recorder=recorder)
    end_ns = cfg.warmup_ns + cfg.measure_ns
    samples = {}

    def total_bytes():
        if write:
            return sum(dev.bytes_written for dev in system.devices)
        return sum(dev.bytes_read for dev in system.devices)

    system.sim.schedule(lambda: samples.__setitem__("start", total_bytes()),
                        cfg.warmup_ns)
    system.sim.schedule(lambda: samples.__setitem__("end", total_bytes()), end_ns)
    programs = [_requester(system, cfg, i, conc, write, end_ns)
                for i in range(conc)]
    system.run_workload(programs)
    system.assert_hygiene()
    moved = samples["end"] - samples["start"]
    gb_per_s = moved / cfg.measure_ns   # bytes per ns == GB/s
    return system, recorder, gb_per_s


def run_rand_rw(cfg, write: bool = False, trace: bool = False) -> BenchResult:
    result = BenchResult(header=["concurrent_requests", "num_devices", "gb_per_s"],
                         rows=[], info={})
    d = cfg.system.num_devices
    for conc in cfg.concurrency_points:
        system, recorder, gb_per_s = _measure_point(cfg, conc, write, trace)
        result.rows.append((conc, d, round(gb_per_s, 6)))
        if trace:
            result.traces.append((f"conc{conc}", recorder))
        if system.deadlock_reports():
            result.info["agile_deadlock"] = True
    return result


def run_rand_read(cfg, trace: bool = False) -> BenchResult:
    return run_rand_rw(cfg, write=False, trace=trace)


def run_rand_write(cfg, trace: bool = False) -> BenchResult:
    return run_rand_rw(cfg, write=True, trace=trace)
