"""Background completion service.

A small number of service warps rotate round-robin over every registered
completion queue.  Each visit is one window pass: the warp's 32 lanes
inspect 32 physically consecutive CQEs, validate them against the
expected phase bit, and record progress in a per-queue 32-bit mask.  Only
a fully set mask rings the CQ doorbell, so the device sees batched head
updates; a drain pass at shutdown rings whatever partial window remains.

Processing a completion releases the submission-queue entry first (so
producers stuck on a full ring can move), then applies the data movement
to the owning cache line and clears the issuing transaction's barrier.
User threads therefore never hold a lock while waiting on I/O: the
service is the sole releaser of shared queue resources.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .nvme_queue import (CompletionQueue, ProtocolViolation, SubmissionQueue,
                         attempt_enqueue, command_for, select_sq)
from .sim_core import AtomicWord, Delay, WaitQueue


class UnknownCid(ProtocolViolation):
    """A completion arrived with no matching in-flight command."""


class TransactionBarrier:
    """Per-command completion flag cleared by the service.

    Issuers park on ``waiters`` instead of holding any lock; a barrier
    linked to a submission-queue entry may only be cleared by the service.
    """

    PENDING = 0
    DONE = 1

    __slots__ = ("sim", "owner", "state", "waiters", "created_at", "done_at",
                 "sq_idx", "slot")

    def __init__(self, sim, owner: str, done: bool = False):
        self.sim = sim
        self.owner = owner
        self.state = AtomicWord(self.DONE if done else self.PENDING)
        self.waiters = WaitQueue(sim)
        self.created_at = sim.now
        self.done_at = sim.now if done else None
        self.sq_idx = None
        self.slot = None

    def link(self, sq_idx: int, slot: int) -> None:
        self.sq_idx = sq_idx
        self.slot = slot

    @property
    def is_done(self) -> bool:
        return self.state.load() == self.DONE

    @property
    def linked(self) -> bool:
        return self.sq_idx is not None

    def mark_done(self, by_service: bool) -> None:
        if self.linked and not by_service:
            raise ProtocolViolation("issuer cleared a barrier linked to an SQE")
        if not self.state.cas(self.PENDING, self.DONE):
            raise ProtocolViolation("barrier cleared twice")
        self.done_at = self.sim.now
        self.waiters.wake_all()


@dataclass
class ServiceStats:
    completions: int = 0
    windows_rung: int = 0
    drain_entries_rung: int = 0
    barrier_count: int = 0
    barrier_latency_sum: int = 0

    @property
    def mean_barrier_ns(self) -> float:
        if not self.barrier_count:
            return 0.0
        return self.barrier_latency_sum / self.barrier_count


class AgileService:
    def __init__(self, sim, cqs: list[CompletionQueue], sqs: list[SubmissionQueue],
                 cache, num_warps: int = 4, poll_ns: int = 400,
                 idle_max_ns: int = 3200, outstanding: AtomicWord | None = None):
        self.sim = sim
        self.cqs = cqs
        self.sqs = sqs
        self.cache = cache
        self.num_warps = max(1, num_warps)
        self.poll_ns = poll_ns
        self.idle_max_ns = max(poll_ns, idle_max_ns)
        self.outstanding = outstanding if outstanding is not None else AtomicWord(0)
        self.stats = ServiceStats()
        self.started = False
        self.stop_requested = False
        self.pending_fills = deque()   # refills chased behind eviction write-backs
        self._warp_tasks = []
        self._warps_exited = 0

    # ------------------------------------------------------------- lifecycle

    def start(self, system) -> None:
        assert not self.started, "service already running"
        self.started = True
        self.sim.trace("svc", "svc", "start", (self.num_warps,))
        for w in range(self.num_warps):
            task = system.spawn_internal(f"svc{w}", self._warp_program, w,
                                         kind="service_warp")
            self._warp_tasks.append(task)

    def request_stop(self) -> None:
        self.stop_requested = True
        self.sim.trace("svc", "svc", "stop", ())

    # ------------------------------------------------------------ warp logic

    def _warp_program(self, task, chain, warp_id: int):
        pos = warp_id
        n = len(self.cqs)
        idle = self.poll_ns
        while True:
            cq = self.cqs[pos % n]
            processed = self.cq_polling(cq, chain)
            if self.pending_fills:
                yield from self._submit_pending(chain)
            pos += self.num_warps
            idle = self.poll_ns if processed else min(idle * 2, self.idle_max_ns)
            if (self.stop_requested and self.outstanding.load() == 0
                    and not self.pending_fills):
                break
            yield Delay(idle)
        # the last warp out rings residual partial windows, so no pass ever
        # observes a drained (unaligned) offset
        self._warps_exited += 1
        if self._warps_exited == self.num_warps:
            self._drain_partial_windows(chain)

    def cq_polling(self, cq: CompletionQueue, chain) -> int:
        """One window pass over ``cq``; returns completions processed."""
        if not cq.claim.cas(0, 1):
            return 0   # another warp owns this queue right now
        try:
            offset = cq.poll_offset
            mask = cq.poll_mask
            window = cq.window
            processed = 0
            for lane in range(window):
                if mask >> lane & 1:
                    continue
                v = offset + lane
                if self.process_cqe(cq, v, cq.expected_phase(v), chain):
                    mask |= 1 << lane
                    processed += 1
            if mask == (1 << window) - 1:
                cq.ring(offset + window, chain.task.name)
                self.stats.windows_rung += 1
                mask = 0
                cq.poll_offset = offset + window
            cq.poll_mask = mask
            return processed
        finally:
            cq.claim.store(0)

    def process_cqe(self, cq: CompletionQueue, v: int, phase_bit: int, chain) -> bool:
        """Validate and consume the CQE at virtual index ``v``.

        Resolves CID -> SQE, releases the entry, applies cache-side
        completion effects, and clears the transaction barrier.
        """
        ent = cq.entries[v % cq.depth]
        if ent.phase != phase_bit:
            return False
        sq = self.sqs[ent.sq_idx]
        slot = ent.cid   # CID == SQE index
        ctx = sq.pending.get(slot)
        if ctx is None:
            raise UnknownCid(
                f"cq{cq.cq_idx} completion cid={ent.cid} sq={ent.sq_idx} matches nothing")
        sq.release_sqe(slot, chain.task.name)
        self.sim.trace(chain.task.name, "svc", "cqe_process",
                       (cq.cq_idx, v, ent.cid, ent.sq_idx))
        if ctx.line is not None:
            follow = self.cache.complete_io(ctx, chain)
            if follow is not None:
                self.pending_fills.append(follow)
        ctx.barrier.mark_done(by_service=True)
        self.stats.completions += 1
        self.stats.barrier_count += 1
        self.stats.barrier_latency_sum += self.sim.now - ctx.barrier.created_at
        return True

    # -------------------------------------------------------------- plumbing

    def _submit_pending(self, chain):
        """Best-effort submission of chased refills; never parks on a full ring.

        Anything that does not fit stays queued for the next rotation, so a
        lone warp can keep consuming completions and freeing entries.
        """
        for _ in range(len(self.pending_fills)):
            ctx = self.pending_fills.popleft()
            placed = False
            sqs = [sq for sq in self.sqs if sq.dev_idx == ctx.dev_idx]
            start = select_sq(chain.task.task_id, len(sqs))
            cmd = command_for(ctx, self.cache.block_size)
            for k in range(len(sqs)):
                sq = sqs[(start + k) % len(sqs)]
                ok = yield from attempt_enqueue(sq, cmd, ctx, chain)
                if ok:
                    placed = True
                    break
            if not placed:
                self.pending_fills.append(ctx)

    def _drain_partial_windows(self, chain) -> None:
        for cq in self.cqs:
            mask = cq.poll_mask
            if mask == 0:
                continue
            k = 0
            while mask >> k & 1:
                k += 1
            assert mask == (1 << k) - 1, "residue must be a contiguous prefix"
            cq.ring(cq.poll_offset + k, chain.task.name, drain=True)
            self.stats.drain_entries_rung += k
            cq.poll_offset += k
            cq.poll_mask = 0
