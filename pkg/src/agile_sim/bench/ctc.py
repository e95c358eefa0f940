"""Compute/communication overlap sweep.

Every task issues a fixed batch of reads per epoch and then computes for
a configurable time.  Synchronous mode fetches, waits, then computes;
asynchronous mode keeps two buffer sets and issues the next epoch's batch
before waiting on the current one, so the device works under the compute
phase.  The sweep calibrates the per-epoch communication time with a
zero-compute run, then scales compute to hit each target ratio; reported
ratios are measured from the synchronous run, not assumed.
"""

from __future__ import annotations

import copy

from . import BenchResult, ideal_speedup
from ..sim_core import Delay, Rendezvous, TraceRecorder
from ..system import AgileSystem


def _block_for(cfg, epoch: int, task_idx: int, i: int) -> int:
    per_epoch = cfg.tasks * cfg.reads_per_task
    base = epoch * per_epoch + task_idx * cfg.reads_per_task + i
    return base % cfg.system.device.num_blocks


def _sync_program(system: AgileSystem, cfg, epoch_bar, task_idx: int,
                  compute_ns: int):
    api = system.api

    def fn(task, chain):
        bufs = [api.make_buf() for _ in range(cfg.reads_per_task)]
        for e in range(cfg.epochs):
            for i in range(cfg.reads_per_task):
                yield from api.async_read(0, _block_for(cfg, e, task_idx, i),
                                          bufs[i], chain)
            for buf in bufs:
                yield from api.wait(buf, chain)
            # compute starts only after every task's data arrived
            yield from epoch_bar.wait(task)
            if compute_ns:
                yield Delay(compute_ns)

    return fn


def _async_program(system: AgileSystem, cfg, epoch_bar, task_idx: int,
                   compute_ns: int):
    api = system.api

    def fn(task, chain):
        cur = [api.make_buf() for _ in range(cfg.reads_per_task)]
        nxt = [api.make_buf() for _ in range(cfg.reads_per_task)]
        for i in range(cfg.reads_per_task):
            yield from api.async_read(0, _block_for(cfg, 0, task_idx, i),
                                      cur[i], chain)
        for e in range(cfg.epochs):
            # next epoch's fetches ride under this epoch's compute
            if e + 1 < cfg.epochs:
                for i in range(cfg.reads_per_task):
                    yield from api.async_read(0, _block_for(cfg, e + 1, task_idx, i),
                                              nxt[i], chain)
            for buf in cur:
                yield from api.wait(buf, chain)
            yield from epoch_bar.wait(task)
            if compute_ns:
                yield Delay(compute_ns)
            cur, nxt = nxt, cur

    return fn


def _run_mode(cfg, mode: str, compute_ns: int, trace: bool):
    recorder = TraceRecorder() if trace else None
    system = AgileSystem(copy.deepcopy(cfg.system), recorder=recorder)
    epoch_bar = Rendezvous(system.sim, cfg.tasks)
    make = _sync_program if mode == "sync" else _async_program
    programs = [make(system, cfg, epoch_bar, i, compute_ns)
                for i in range(cfg.tasks)]
    system.run_workload(programs)
    system.assert_hygiene()
    return system, recorder


def run_ctc_sweep(cfg, trace: bool = False) -> BenchResult:
    result = BenchResult(header=["ctc", "t_sync_ns", "t_async_ns", "speedup", "ideal"],
                         rows=[], info={})
    # calibration: zero-compute synchronous run measures pure communication
    base_sys, _ = _run_mode(cfg, "sync", 0, False)
    comm_per_epoch = base_sys.sim.now / cfg.epochs
    result.info["comm_per_epoch_ns"] = comm_per_epoch

    for target in cfg.ctc_points:
        compute_ns = int(round(target * comm_per_epoch))
        sync_sys, rec_s = _run_mode(cfg, "sync", compute_ns, trace)
        async_sys, rec_a = _run_mode(cfg, "async", compute_ns, trace)
        t_sync = sync_sys.sim.now
        t_async = async_sys.sim.now
        compute_total = compute_ns * cfg.epochs
        comm_total = max(1, t_sync - compute_total)
        measured_ctc = compute_total / comm_total
        speedup = t_sync / t_async
        result.rows.append((round(measured_ctc, 6), t_sync, t_async,
                            round(speedup, 6), round(ideal_speedup(measured_ctc), 6)))
        if trace:
            result.traces.append((f"ctc{target}_sync", rec_s))
            result.traces.append((f"ctc{target}_async", rec_a))
        for system in (sync_sys, async_sys):
            if system.deadlock_reports():
                result.info["agile_deadlock"] = True
    return result
