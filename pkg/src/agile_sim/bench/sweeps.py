"""Queue-geometry and cache-size sweeps over a synthetic gather workload.

The workload stands in for embedding lookups: each epoch every task
gathers a random set of blocks and spends configurable compute time per
gather.  Synchronous mode prefetches the current epoch, reads, computes;
asynchronous mode prefetches the next epoch first, so gathers and compute
overlap the fills - unless submission entries (queue sweep) or cache
lines (cache sweep) run out, which is exactly the contention these
sweeps expose.
"""

from __future__ import annotations

import copy
import random

from . import BenchResult
from ..sim_core import Delay, Rendezvous, TraceRecorder
from ..system import AgileSystem


def _gather_sets(cfg):
    """Random gather targets, sampled without replacement from the pool."""
    need = cfg.tasks * cfg.epochs * cfg.gathers_per_epoch
    if need > cfg.block_pool:
        raise ValueError("block_pool smaller than the total gather count")
    rng = random.Random(f"{cfg.system.seed}:gather")
    draw = rng.sample(range(cfg.block_pool), need)
    it = iter(draw)
    return [[[next(it) for _ in range(cfg.gathers_per_epoch)]
             for _ in range(cfg.epochs)]
            for _ in range(cfg.tasks)]


def _elem_index(system: AgileSystem, blk: int) -> int:
    return blk * (system.block_size // 4)


def _sync_gather(system: AgileSystem, cfg, epoch_bar, blocks, idx: int):
    api = system.api
    compute_ns = cfg.gathers_per_epoch * cfg.compute_ns_per_gather

    def fn(task, chain):
        for e in range(cfg.epochs):
            for blk in blocks[idx][e]:
                yield from api.prefetch(0, blk, chain)
            for blk in blocks[idx][e]:
                yield from api.array_get(0, _elem_index(system, blk), chain)
            # bulk-synchronous: compute starts once the whole epoch arrived
            yield from epoch_bar.wait(task)
            yield Delay(compute_ns)

    return fn


def _async_gather(system: AgileSystem, cfg, epoch_bar, blocks, idx: int):
    api = system.api
    compute_ns = cfg.gathers_per_epoch * cfg.compute_ns_per_gather

    def fn(task, chain):
        for blk in blocks[idx][0]:
            yield from api.prefetch(0, blk, chain)
        for e in range(cfg.epochs):
            # next epoch's fills ride under this epoch's reads and compute;
            # with too few lines they also evict this epoch's data early
            if e + 1 < cfg.epochs:
                for blk in blocks[idx][e + 1]:
                    yield from api.prefetch(0, blk, chain)
            else:
                for _ in range(cfg.gathers_per_epoch):
                    yield from api.prefetch_skip(chain)
            for blk in blocks[idx][e]:
                yield from api.array_get(0, _elem_index(system, blk), chain)
            yield from epoch_bar.wait(task)
            yield Delay(compute_ns)

    return fn


def _run_gather(cfg, system_cfg, mode: str, blocks, trace: bool):
    recorder = TraceRecorder() if trace else None
    system = AgileSystem(copy.deepcopy(system_cfg), recorder=recorder)
    epoch_bar = Rendezvous(system.sim, cfg.tasks)
    make = _sync_gather if mode == "sync" else _async_gather
    programs = [make(system, cfg, epoch_bar, blocks, i) for i in range(cfg.tasks)]
    system.run_workload(programs, warp_size=32)
    system.assert_hygiene()
    return system, recorder


def run_queue_sweep(cfg, trace: bool = False) -> BenchResult:
    result = BenchResult(
        header=["queue_pairs", "queue_depth", "t_sync_ns", "t_async_ns", "speedup"],
        rows=[], info={})
    blocks = _gather_sets(cfg)
    for qp in cfg.queue_pair_points:
        system_cfg = copy.deepcopy(cfg.system)
        system_cfg.queues.pairs_per_device = qp
        system_cfg.queues.sq_depth = 64
        system_cfg.queues.cq_depth = 64
        # cache sized out of the way: entry capacity is the variable here
        system_cfg.cache.lines = max(system_cfg.cache.lines,
                                     4 * cfg.tasks * cfg.gathers_per_epoch)
        sync_sys, rec_s = _run_gather(cfg, system_cfg, "sync", blocks, trace)
        async_sys, rec_a = _run_gather(cfg, system_cfg, "async", blocks, trace)
        t_sync, t_async = sync_sys.sim.now, async_sys.sim.now
        result.rows.append((qp, 64, t_sync, t_async, round(t_sync / t_async, 6)))
        if trace:
            result.traces.append((f"qp{qp}_sync", rec_s))
            result.traces.append((f"qp{qp}_async", rec_a))
        for system in (sync_sys, async_sys):
            if system.deadlock_reports():
                result.info["agile_deadlock"] = True
    return result


def run_cache_sweep(cfg, trace: bool = False) -> BenchResult:
    result = BenchResult(
        header=["cache_lines", "cache_bytes", "t_sync_ns", "t_async_ns", "speedup"],
        rows=[], info={})
    blocks = _gather_sets(cfg)
    for lines in cfg.cache_line_points:
        system_cfg = copy.deepcopy(cfg.system)
        system_cfg.cache.lines = lines
        sync_sys, rec_s = _run_gather(cfg, system_cfg, "sync", blocks, trace)
        async_sys, rec_a = _run_gather(cfg, system_cfg, "async", blocks, trace)
        t_sync, t_async = sync_sys.sim.now, async_sys.sim.now
        result.rows.append((lines, lines * cfg.system.device.block_size,
                            t_sync, t_async, round(t_sync / t_async, 6)))
        if trace:
            result.traces.append((f"lines{lines}_sync", rec_s))
            result.traces.append((f"lines{lines}_async", rec_a))
        for system in (sync_sys, async_sys):
            if system.deadlock_reports():
                result.info["agile_deadlock"] = True
    return result
