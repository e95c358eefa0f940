"""NVMe queue-pair protocol.

Submission rings carry per-entry lock words with the three-state
EMPTY -> UPDATED -> ISSUED discipline; doorbell publication is serialized
behind a single lock whose holder batch-scans forward and publishes once.
Completion rings carry a phase bit per entry so pollers can detect new
completions without a shared counter.

Ring indices are virtual (monotone integers); the physical slot is
``index % depth``.  Depth must be a power of two and one slot is reserved
to disambiguate full from empty, so capacity is ``depth - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .sim_core import AtomicWord, Delay, WaitQueue
from .lock_chain import AgileLock, acquire, release, try_acquire, ACQUIRED


class ProtocolViolation(RuntimeError):
    """An illegal queue-state transition was attempted."""


class SqState(IntEnum):
    EMPTY = 0
    UPDATED = 1
    ISSUED = 2


class Opcode(IntEnum):
    READ = 0
    WRITE = 1


SUCCESS = "success"
PENDING = "pending"

# Command context kinds: what completion handling must do.
FILL = "fill"            # READ into a cache line
WB_KEEP = "wb_keep"      # write-back, line stays resident (flush / eager write)
WB_EVICT = "wb_evict"    # write-back for eviction, line is reclaimed after


@dataclass
class NvmeCommand:
    opcode: Opcode
    cid: int | None
    dev_idx: int
    blk_idx: int
    dest: object = None       # cache line reference
    nbytes: int = 4096


@dataclass
class CommandContext:
    """Host-side record for one in-flight command.

    Links the command to its transaction barrier and the cache line it
    fills or writes back, so completion handling can release everything.
    """

    kind: str
    dev_idx: int
    blk_idx: int
    line: object = None
    barrier: object = None
    opcode: Opcode = Opcode.READ
    sq_idx: int | None = None
    slot: int | None = None
    issued_by: str = "?"
    refill_read: bool = False


def command_for(ctx: CommandContext, block_size: int) -> NvmeCommand:
    return NvmeCommand(opcode=ctx.opcode, cid=None, dev_idx=ctx.dev_idx,
                       blk_idx=ctx.blk_idx, dest=ctx.line, nbytes=block_size)


class _SqEntry:
    __slots__ = ("state", "cmd", "reserved")

    def __init__(self):
        self.state = AtomicWord(SqState.EMPTY)
        self.cmd = None
        self.reserved = False


def select_sq(thread_idx: int, num_sqs: int) -> int:
    """Initial SQ choice for a thread; callers rotate by +1 on full."""
    return thread_idx % num_sqs


class SubmissionQueue:
    def __init__(self, sim, sq_idx: int, dev_idx: int, cq_idx: int, depth: int,
                 timing, doorbell_sink, head_hook=None, detector=None,
                 outstanding: AtomicWord | None = None):
        if depth < 2 or depth & (depth - 1):
            raise ValueError("depth must be a power of two >= 2")
        if depth > 65536:
            raise ValueError("depth exceeds the 16-bit CID space")
        self.sim = sim
        self.sq_idx = sq_idx
        self.dev_idx = dev_idx
        self.cq_idx = cq_idx
        self.depth = depth
        self.timing = timing
        self.entries = [_SqEntry() for _ in range(depth)]
        self.tail = AtomicWord(0)
        self.head = AtomicWord(0)
        self.doorbell_value = AtomicWord(0)
        self.doorbell_lock = AgileLock(sim, f"sqdb{sq_idx}", detector)
        self.pending: dict[int, CommandContext] = {}   # slot -> context
        self._sink = doorbell_sink
        self._head_hook = head_hook
        self._outstanding = outstanding

    # ------------------------------------------------------------- producers

    def capacity(self) -> int:
        return self.depth - 1

    def in_flight(self) -> int:
        return self.tail.load() - self.head.load()

    def is_full(self) -> bool:
        return (self.tail.load() - self.head.load()) % self.depth == self.depth - 1

    def try_reserve(self) -> int | None:
        """Claim the next tail slot, or None when the ring is full."""
        while True:
            t = self.tail.load()
            if (t - self.head.load()) % self.depth == self.depth - 1:
                return None
            if self.tail.cas(t, t + 1):
                slot = t % self.depth
                entry = self.entries[slot]
                assert not entry.reserved and entry.state.load() == SqState.EMPTY
                entry.reserved = True
                if self._outstanding is not None:
                    self._outstanding.add(1)
                return slot

    def cid_for_slot(self, slot: int) -> int:
        """CIDs equal slot indices: unique per in-flight batch by construction."""
        return slot

    def write_command(self, slot: int, cmd: NvmeCommand, ctx: CommandContext) -> None:
        entry = self.entries[slot]
        cmd.cid = self.cid_for_slot(slot)
        entry.cmd = cmd
        ctx.sq_idx = self.sq_idx
        ctx.slot = slot
        if ctx.barrier is not None:
            ctx.barrier.link(self.sq_idx, slot)
        self.pending[slot] = ctx

    def mark_updated(self, slot: int, who: str) -> None:
        if not self.entries[slot].state.cas(SqState.EMPTY, SqState.UPDATED):
            raise ProtocolViolation(f"sq{self.sq_idx} slot {slot}: not EMPTY")
        self.sim.trace(who, "nvme", "sqe_updated", (self.sq_idx, slot))

    # -------------------------------------------------------- doorbell owner

    def scan_issue(self, who: str) -> tuple[int, int]:
        """Flip UPDATED->ISSUED forward from the doorbell, stop at EMPTY.

        Caller must hold the doorbell lock.  Returns (old, new) virtual
        doorbell values; publish happens separately in commit_doorbell.
        """
        old = self.doorbell_value.load()
        v = old
        while True:
            entry = self.entries[v % self.depth]
            if not entry.state.cas(SqState.UPDATED, SqState.ISSUED):
                break
            self.sim.trace(who, "nvme", "sqe_issued",
                           (self.sq_idx, v % self.depth, entry.cmd.cid))
            v += 1
        return old, v

    def commit_doorbell(self, new: int, who: str) -> None:
        old = self.doorbell_value.load()
        assert new > old, "doorbell values are strictly increasing"
        self.doorbell_value.store(new)
        self.sim.trace(who, "nvme", "doorbell", (self.sq_idx, old, new, self.depth))
        self._sink(self.sq_idx, new)

    def reached_issued(self, slot: int, ctx: CommandContext) -> bool:
        """True once this command has been published (possibly already done)."""
        if self.pending.get(slot) is not ctx:
            return True   # completed and released while we waited
        return self.entries[slot].state.load() == SqState.ISSUED

    # ------------------------------------------------------------- consumer

    def release_sqe(self, slot: int, who: str) -> CommandContext:
        entry = self.entries[slot]
        if not entry.state.cas(SqState.ISSUED, SqState.EMPTY):
            raise ProtocolViolation(
                f"sq{self.sq_idx} slot {slot}: release of non-ISSUED entry")
        ctx = self.pending.pop(slot)
        entry.reserved = False
        entry.cmd = None
        if self._outstanding is not None:
            self._outstanding.add(-1)
        self.sim.trace(who, "nvme", "sqe_release", (self.sq_idx, slot, self.cid_for_slot(slot)))
        self._advance_head(who)
        return ctx

    def _advance_head(self, who: str) -> None:
        moved = False
        while True:
            h = self.head.load()
            if h >= self.tail.load():
                break
            entry = self.entries[h % self.depth]
            if entry.reserved or entry.state.load() != SqState.EMPTY:
                break
            if self.head.cas(h, h + 1):
                moved = True
        if moved:
            self.sim.trace(who, "nvme", "head", (self.sq_idx, self.head.load()))
            if self._head_hook is not None:
                self._head_hook(self)

    def all_empty(self) -> bool:
        return all(e.state.load() == SqState.EMPTY and not e.reserved
                   for e in self.entries)


class _CqEntry:
    __slots__ = ("cid", "sq_idx", "status", "phase")

    def __init__(self):
        self.cid = 0
        self.sq_idx = 0
        self.status = 0
        self.phase = 0


class CompletionQueue:
    def __init__(self, sim, cq_idx: int, dev_idx: int, depth: int, doorbell_sink=None):
        if depth < 2 or depth & (depth - 1):
            raise ValueError("depth must be a power of two >= 2")
        self.sim = sim
        self.cq_idx = cq_idx
        self.dev_idx = dev_idx
        self.depth = depth
        self.window = min(32, depth)
        self.entries = [_CqEntry() for _ in range(depth)]
        self.device_tail = 0          # device-side virtual post index
        self.host_doorbell = AtomicWord(0)
        self.poll_offset = 0
        self.poll_mask = 0
        self.claim = AtomicWord(0)    # one poller warp at a time
        self.post_wait = WaitQueue(sim)   # naive-mode pollers park here
        self._sink = doorbell_sink

    def expected_phase(self, v: int) -> int:
        """Phase value a new entry at virtual index v carries: lap 0 writes 1."""
        return 1 - ((v // self.depth) & 1)

    def device_can_post(self) -> bool:
        return self.device_tail - self.host_doorbell.load() < self.depth

    def device_post(self, cid: int, sq_idx: int, status: int, who: str) -> None:
        assert self.device_can_post(), "device overwrote an unconsumed CQE"
        v = self.device_tail
        entry = self.entries[v % self.depth]
        entry.cid = cid
        entry.sq_idx = sq_idx
        entry.status = status
        entry.phase = self.expected_phase(v)
        self.device_tail = v + 1
        self.sim.trace(who, "ssd", "cqe_post", (self.cq_idx, v, cid, sq_idx))
        self.post_wait.wake_all()

    def ring(self, new: int, who: str, drain: bool = False) -> None:
        old = self.host_doorbell.load()
        assert new > old
        self.host_doorbell.store(new)
        action = "drain_ring" if drain else "window_ring"
        self.sim.trace(who, "svc", action, (self.cq_idx, old, new))
        if self._sink is not None:
            self._sink(self.cq_idx, new)


# --------------------------------------------------------------- generators

def attempt_sqdb(sq: SubmissionQueue, slot: int, ctx: CommandContext, chain):
    """One doorbell attempt per the serialization protocol.

    If the doorbell lock is free, batch-scan and publish once; either way
    report SUCCESS iff this thread's entry has reached ISSUED.
    """
    if sq.reached_issued(slot, ctx):
        return SUCCESS
    status, _ = try_acquire(sq.doorbell_lock, chain)
    if status is ACQUIRED:
        old, new = sq.scan_issue(chain.task.name)
        if new > old:
            # models the MMIO write: commands scanned above are globally
            # visible before the device sees the new tail
            if sq.timing.doorbell_publish_ns:
                yield Delay(sq.timing.doorbell_publish_ns)
            sq.commit_doorbell(new, chain.task.name)
        release(sq.doorbell_lock, chain)
    return SUCCESS if sq.reached_issued(slot, ctx) else PENDING


def attempt_enqueue(sq: SubmissionQueue, cmd: NvmeCommand, ctx: CommandContext, chain):
    """Generator: returns True on ok, False when the ring is full.

    On ok the command is written, flipped to UPDATED, and the doorbell loop
    is driven until this entry is ISSUED.  The caller holds no lock on
    return and never holds one while waiting.
    """
    slot = sq.try_reserve()
    if slot is None:
        return False
    sq.write_command(slot, cmd, ctx)
    sq.sim.trace(chain.task.name, "nvme", "enqueue",
                 (sq.sq_idx, slot, cmd.cid, cmd.opcode.name, cmd.dev_idx, cmd.blk_idx))
    if sq.timing.cmd_write_ns:
        # the gap before UPDATED is the window in which a doorbell scan
        # legitimately stops at this entry
        yield Delay(sq.timing.cmd_write_ns)
    sq.mark_updated(slot, chain.task.name)
    while True:
        status = yield from attempt_sqdb(sq, slot, ctx, chain)
        if status is SUCCESS:
            return True
        yield from sq.doorbell_lock.waiters.wait(chain.task)


def submit_command(sqs: list[SubmissionQueue], thread_idx: int,
                   cmd: NvmeCommand, ctx: CommandContext, chain, free_wait):
    """Generator: place one command on some SQ of the device.

    Starts at ``thread_idx mod num_sqs`` and rotates on full; after a full
    lap it parks on the device's free-slot queue and retries.  Returns the
    SubmissionQueue used.
    """
    start = select_sq(thread_idx, len(sqs))
    while True:
        for k in range(len(sqs)):
            sq = sqs[(start + k) % len(sqs)]
            ok = yield from attempt_enqueue(sq, cmd, ctx, chain)
            if ok:
                return sq
        yield from free_wait.wait(chain.task)
