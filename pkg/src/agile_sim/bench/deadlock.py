"""Deadlock demonstration: naive issuing versus service-assisted issuing.

The naive protocol makes each issuer responsible for consuming its own
completion: a thread reserves an entry under a queue-wide guard (waiting
inside the guard when the ring is full, on the head entry's lock), issues,
then polls the CQ itself and needs the same guard again to release its
entry.  With more outstanding commands than the ring holds, the guard
holder waits on an entry lock whose owner waits on the guard: a wait-for
cycle the debug chain reports, and every task blocks.

The assisted mode runs the identical workload through the asynchronous
API: issuers hand entry ownership to the completion service and wait on
barriers holding nothing, so the full ring drains and all barriers clear.
"""

from __future__ import annotations

import copy

from . import BenchResult
from ..lock_chain import AgileLock, acquire, release
from ..nvme_queue import CommandContext, NvmeCommand, Opcode
from ..sim_core import Delay, TraceRecorder
from ..system import AgileSystem


class _NaiveDemo:
    def __init__(self, system: AgileSystem, tasks: int):
        sim = system.sim
        det = system.detector
        sq = system.sqs[0]
        self.guard = AgileLock(sim, "sq_guard", det)
        self.entry_locks = [AgileLock(sim, f"sqe_lock{i}", det)
                            for i in range(sq.depth)]
        self.completed = [False] * tasks
        self._consumed: set[int] = set()

    def find_completion(self, cq, cid: int) -> bool:
        # demo scale: fewer commands than the CQ holds, first lap only
        for ent in cq.entries:
            if ent.phase == 1 and ent.cid == cid and cid not in self._consumed:
                self._consumed.add(cid)
                return True
        return False


def _naive_program(system: AgileSystem, demo: _NaiveDemo, idx: int):
    sq = system.sqs[0]
    cq = system.cqs[0]
    timing = system.cfg.timing

    def fn(task, chain):
        name = task.name
        yield from acquire(demo.guard, chain)
        while True:
            slot = sq.try_reserve()
            if slot is not None:
                break
            # ring full: wait for the oldest entry to free, guard in hand
            head_lock = demo.entry_locks[sq.head.load() % sq.depth]
            yield from acquire(head_lock, chain)
            release(head_lock, chain)
        yield from acquire(demo.entry_locks[slot], chain)
        cmd = NvmeCommand(Opcode.READ, None, 0, idx, dest=None,
                          nbytes=system.block_size)
        ctx = CommandContext(kind="naive", dev_idx=0, blk_idx=idx)
        sq.write_command(slot, cmd, ctx)
        system.sim.trace(name, "nvme", "enqueue",
                         (sq.sq_idx, slot, cmd.cid, cmd.opcode.name, 0, idx))
        yield Delay(timing.cmd_write_ns)
        sq.mark_updated(slot, name)
        old, new = sq.scan_issue(name)
        if new > old:
            yield Delay(timing.doorbell_publish_ns)
            sq.commit_doorbell(new, name)
        release(demo.guard, chain)

        while not demo.find_completion(cq, slot):
            yield from cq.post_wait.wait(task)

        # releasing the entry needs the guard again
        yield from acquire(demo.guard, chain)
        sq.release_sqe(slot, name)
        release(demo.entry_locks[slot], chain)
        release(demo.guard, chain)
        demo.completed[idx] = True

    return fn


def _agile_program(system: AgileSystem, done: list, idx: int):
    api = system.api

    def fn(task, chain):
        buf = api.make_buf()
        yield from api.async_read(0, idx, buf, chain)
        yield from api.wait(buf, chain)
        done[idx] = True

    return fn


def _demo_system_cfg(cfg):
    system_cfg = copy.deepcopy(cfg.system)
    system_cfg.num_devices = 1
    system_cfg.queues.pairs_per_device = 1
    system_cfg.queues.sq_depth = cfg.demo_sq_depth
    system_cfg.queues.cq_depth = max(64, cfg.demo_sq_depth)
    system_cfg.debug_locks = True
    return system_cfg


def run_naive(cfg, trace: bool = False):
    recorder = TraceRecorder() if trace else None
    system = AgileSystem(_demo_system_cfg(cfg), recorder=recorder)
    demo = _NaiveDemo(system, cfg.demo_tasks)
    programs = [_naive_program(system, demo, i) for i in range(cfg.demo_tasks)]
    stats = system.run_workload(programs, limit_ns=cfg.demo_limit_ns,
                                start_service=False)
    return {
        "mode": "naive",
        "tasks": cfg.demo_tasks,
        "barriers_done": sum(demo.completed),
        "tasks_blocked": stats.tasks_blocked,
        "cycles_reported": len(system.deadlock_reports()),
        "final_clock_ns": stats.final_clock,
        "system": system,
        "recorder": recorder,
    }


def run_agile(cfg, trace: bool = False):
    recorder = TraceRecorder() if trace else None
    system = AgileSystem(_demo_system_cfg(cfg), recorder=recorder)
    done = [False] * cfg.demo_tasks
    programs = [_agile_program(system, done, i) for i in range(cfg.demo_tasks)]
    stats = system.run_workload(programs, limit_ns=cfg.demo_limit_ns)
    system.assert_hygiene()
    return {
        "mode": "agile",
        "tasks": cfg.demo_tasks,
        "barriers_done": sum(done),
        "tasks_blocked": stats.tasks_blocked,
        "cycles_reported": len(system.deadlock_reports()),
        "final_clock_ns": stats.final_clock,
        "system": system,
        "recorder": recorder,
    }


def run_deadlock_demo(cfg, trace: bool = False) -> BenchResult:
    result = BenchResult(
        header=["mode", "tasks", "barriers_done", "tasks_blocked",
                "cycles_reported", "final_clock_ns"],
        rows=[], info={})
    outcomes = []
    if cfg.mode in ("naive", "both"):
        outcomes.append(run_naive(cfg, trace))
    if cfg.mode in ("agile", "both"):
        outcomes.append(run_agile(cfg, trace))
    for out in outcomes:
        result.rows.append((out["mode"], out["tasks"], out["barriers_done"],
                            out["tasks_blocked"], out["cycles_reported"],
                            out["final_clock_ns"]))
        if trace and out["recorder"] is not None:
            result.traces.append((out["mode"], out["recorder"]))
        if out["mode"] == "agile" and out["cycles_reported"]:
            result.info["agile_deadlock"] = True
        if out["mode"] == "naive":
            result.info["naive_deadlocked"] = (out["tasks_blocked"] > 0
                                               and out["cycles_reported"] > 0)
        result.info.setdefault("deadlock_reports", []).extend(
            out["system"].detector.report_lines())
        result.info.setdefault("service_stats", {})[out["mode"]] = {
            "completions": out["system"].service.stats.completions,
            "windows_rung": out["system"].service.stats.windows_rung,
            "mean_barrier_ns": out["system"].service.stats.mean_barrier_ns,
        }
    return result
