"""Assembles a full simulated stack from a SystemConfig.

An AgileSystem owns the simulator, the devices with their queue pairs,
the software cache, the optional share table, the completion service,
and the lock-chain detector.  Workloads are user programs: callables
``fn(task, chain)`` returning generators, spawned either standalone or
grouped into 32-lane warps.
"""

from __future__ import annotations

from .agile_service import AgileService
from .config import SystemConfig
from .gpu_api import AgileApi, UserWarp
from .lock_chain import AgileLockChain, DeadlockDetector
from .nvme_queue import CompletionQueue, SubmissionQueue, command_for, submit_command
from .share_table import ShareTable
from .sim_core import AtomicWord, Simulator, TraceRecorder, WaitQueue
from .software_cache import ClockPolicy, ModuloPolicy, SoftwareCache
from .ssd_model import BlockStore, LatencyModel, SsdDevice


def _make_policy(cache_spec):
    if cache_spec.policy == "clock":
        policy = ClockPolicy()
    elif cache_spec.policy == "modulo":
        policy = ModuloPolicy()
    else:
        raise ValueError(f"unknown cache policy {cache_spec.policy!r}")
    policy.busy_eviction_choice = cache_spec.busy_choice
    return policy


class AgileSystem:
    def __init__(self, cfg: SystemConfig, recorder: TraceRecorder | None = None):
        self.cfg = cfg
        self.recorder = recorder
        self.sim = Simulator(seed=cfg.seed, random_ties=cfg.random_ties,
                             livelock_budget=cfg.livelock_budget, recorder=recorder)
        self.detector = DeadlockDetector(self.sim, enabled=cfg.debug_locks)
        self.outstanding = AtomicWord(0)
        self.block_size = cfg.device.block_size
        self.hygiene_violations: list = []
        self._chains: list[AgileLockChain] = []
        self._warps: list[UserWarp] = []

        self.devices: list[SsdDevice] = []
        self.sqs: list[SubmissionQueue] = []
        self.cqs: list[CompletionQueue] = []
        self.free_waits: list[WaitQueue] = []
        spec = cfg.device
        latency = LatencyModel(
            read_base_ns=spec.read_latency_ns, write_base_ns=spec.write_latency_ns,
            jitter=spec.jitter, jitter_ns=spec.jitter_ns,
            per_channel_rate=spec.per_channel_rate or None)
        for d in range(cfg.num_devices):
            store = BlockStore(spec.num_blocks, spec.block_size)
            dev = SsdDevice(self.sim, d, store, latency, spec.parallelism, cfg.timing)
            free_wait = WaitQueue(self.sim)
            hook = (lambda fw: lambda _sq: fw.wake_all())(free_wait)
            for _ in range(cfg.queues.pairs_per_device):
                cq = CompletionQueue(self.sim, len(self.cqs), d, cfg.queues.cq_depth,
                                     doorbell_sink=dev.on_cq_doorbell)
                sq = SubmissionQueue(self.sim, len(self.sqs), d, cq.cq_idx,
                                     cfg.queues.sq_depth, cfg.timing,
                                     doorbell_sink=dev.on_sq_doorbell,
                                     head_hook=hook, detector=self.detector,
                                     outstanding=self.outstanding)
                dev.bind_queue_pair(sq, cq)
                self.sqs.append(sq)
                self.cqs.append(cq)
            self.devices.append(dev)
            self.free_waits.append(free_wait)

        self.cache = SoftwareCache(self.sim,
                                   cfg.cache.resolved_lines(self.block_size),
                                   self.block_size,
                                   policy=_make_policy(cfg.cache),
                                   detector=self.detector)
        self.cache.submit = self._submit
        self.table = None
        if cfg.share_table.enabled:
            self.table = ShareTable(self.sim, cfg.share_table.buckets, self.cache,
                                    detector=self.detector)
        self.service = AgileService(self.sim, self.cqs, self.sqs, self.cache,
                                    num_warps=cfg.service.warps,
                                    poll_ns=cfg.service.poll_ns,
                                    idle_max_ns=cfg.service.idle_max_ns,
                                    outstanding=self.outstanding)
        self.api = AgileApi(self)

    # ------------------------------------------------------------- plumbing

    def device_sqs(self, dev_idx: int) -> list[SubmissionQueue]:
        return [sq for sq in self.sqs if sq.dev_idx == dev_idx]

    def _submit(self, ctx, chain):
        cmd = command_for(ctx, self.block_size)
        yield from submit_command(self.device_sqs(ctx.dev_idx), chain.task.task_id,
                                  cmd, ctx, chain, self.free_waits[ctx.dev_idx])

    def new_chain(self, task) -> AgileLockChain:
        chain = AgileLockChain(task)
        self._chains.append(chain)
        return chain

    def new_warp(self) -> UserWarp:
        warp = UserWarp(self.sim, len(self._warps))
        self._warps.append(warp)
        return warp

    # ------------------------------------------------------------ lifecycle

    def start_agile(self) -> None:
        self.service.start(self)

    def stop_agile(self) -> None:
        self.service.request_stop()

    def spawn_internal(self, name, fn, *args, kind="user_thread"):
        """Spawn a task whose program receives (task, chain, *args)."""
        box = {}

        def runner():
            task = box["task"]
            chain = self.new_chain(task)
            yield from fn(task, chain, *args)
            # exit checks run on normal completion only; a task closed while
            # parked (end of a deadlocked run) legitimately still holds locks
            self._on_task_exit(task, chain)

        box["task"] = self.sim.spawn(name, runner(), kind=kind)
        return box["task"]

    def spawn_user(self, name, fn, warp: UserWarp | None = None):
        task = self.spawn_internal(name, fn, kind="user_thread")
        if warp is not None:
            warp.add_lane(task)
        return task

    def _on_task_exit(self, task, chain) -> None:
        if chain.held:
            held = [lk.label for lk in chain.held]
            self.hygiene_violations.append((task.name, held))
            raise RuntimeError(f"{task.name} exited holding locks: {held}")
        if task.warp is not None:
            task.warp.deactivate(task)

    def run_workload(self, programs, limit_ns=None, warp_size: int | None = None,
                     start_service: bool = True):
        """Spawn `programs` (list of fn(task, chain)), run to quiescence.

        A coordinator stops the service once every user task finishes, so
        quiescence is reachable.  Returns SimStats.
        """
        if start_service:
            self.start_agile()
        users = []
        warp = None
        for i, fn in enumerate(programs):
            if warp_size and warp_size > 1:
                if i % warp_size == 0:
                    warp = self.new_warp()
                users.append(self.spawn_user(f"u{i}", fn, warp=warp))
            else:
                users.append(self.spawn_user(f"u{i}", fn))

        if start_service:
            def coordinator(task, chain):
                for t in users:
                    yield from t.join(task)
                self.stop_agile()

            self.spawn_internal("coord", coordinator)
        return self.sim.run_until_quiescent(limit_ns)

    # --------------------------------------------------------------- audits

    def assert_hygiene(self) -> None:
        assert not self.hygiene_violations, self.hygiene_violations
        for chain in self._chains:
            assert not chain.held, (chain.task.name, [lk.label for lk in chain.held])

    def deadlock_reports(self) -> list:
        return self.detector.reports
