"""Block-granular software cache over device blocks.

Lines move through INVALID -> BUSY -> READY -> MODIFIED -> BUSY -> ...
with a waiter list per line so concurrent requests for a block in flight
coalesce onto one device read.  Writes are write-back: MODIFIED lines are
flushed to the device on eviction, on flush, or eagerly when a full-block
write lands.  A write-back in progress keeps the line BUSY, which both
serializes per-block device writes and keeps readers off bytes that are
mid-transfer.

Victim selection is delegated to a pluggable policy; the built-in clock
policy is fully associative with one reference bit per line.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .agile_service import TransactionBarrier
from .lock_chain import AgileLock, acquire_fast, release
from .nvme_queue import FILL, WB_EVICT, WB_KEEP, CommandContext, Opcode
from .sim_core import WaitQueue


class IllegalState(RuntimeError):
    """A line transition that the state machine forbids."""


class CacheState(IntEnum):
    INVALID = 0
    BUSY = 1
    READY = 2
    MODIFIED = 3


HIT = "hit"
FILLING = "filling"
MISS_FILL_STARTED = "miss_fill_started"
RETRY = "retry"
_RETRY = RETRY

RESET = "reset"
WRITEBACK_STARTED = "writeback_started"
DEFERRED = "deferred"


class CacheLine:
    __slots__ = ("index", "state", "tag", "next_tag", "claimed", "busy_kind",
                 "data", "waiters", "ready_wait", "lock")

    def __init__(self, sim, index: int, block_size: int, detector=None):
        self.index = index
        self.state = CacheState.INVALID
        self.tag = None            # (dev_idx, blk_idx) currently owned
        self.next_tag = None       # incoming tag while a write-back drains
        self.claimed = False       # reserved for tag while INVALID
        self.busy_kind = None      # fill | wb_keep | wb_evict
        self.data = bytearray(block_size)
        self.waiters = []          # AgileBuf refs to fill when data turns READY
        self.ready_wait = WaitQueue(sim)
        self.lock = AgileLock(sim, f"line{index}", detector)

    def available_as_victim(self) -> bool:
        return self.state != CacheState.BUSY and not self.claimed


class CachePolicy:
    """Victim-selection plug-in.

    ``map`` may return a BUSY line; the cache then applies
    ``busy_eviction_choice``: "wait" parks the requester until the line
    settles, "find_another" calls map again with an incremented ``tries``.
    """

    busy_eviction_choice = "wait"

    def bind(self, num_lines: int) -> None:
        pass

    def map(self, cache: "SoftwareCache", key, tries: int = 0):
        raise NotImplementedError

    def on_hit(self, line_idx: int) -> None:
        pass

    def on_insert(self, line_idx: int) -> None:
        pass


class ClockPolicy(CachePolicy):
    """Clock replacement: one reference bit per line, hand sweeps and clears."""

    busy_eviction_choice = "wait"

    def __init__(self):
        self.hand = 0
        self.ref = []

    def bind(self, num_lines: int) -> None:
        self.ref = [0] * num_lines

    def on_hit(self, line_idx: int) -> None:
        self.ref[line_idx] = 1

    def on_insert(self, line_idx: int) -> None:
        self.ref[line_idx] = 1

    def map(self, cache, key, tries: int = 0):
        n = len(cache.lines)
        scanned = 0
        while scanned < 2 * n:
            idx = self.hand
            line = cache.lines[idx]
            if not line.available_as_victim():
                self.hand = (idx + 1) % n
                scanned += 1
                continue
            if self.ref[idx]:
                self.ref[idx] = 0
                self.hand = (idx + 1) % n
                scanned += 1
                continue
            self.hand = (idx + 1) % n
            return idx
        return None    # every line is busy: surfaced to the caller as a wait


class ModuloPolicy(CachePolicy):
    """Direct-mapped with linear probing; demonstrates find_another."""

    def __init__(self, busy_eviction_choice: str = "find_another"):
        self.busy_eviction_choice = busy_eviction_choice
        self._n = 0

    def bind(self, num_lines: int) -> None:
        self._n = num_lines

    def map(self, cache, key, tries: int = 0):
        if tries >= self._n:
            return None
        dev, blk = key
        return (dev * 7919 + blk + tries) % self._n


@dataclass
class AccessResult:
    kind: str
    line: CacheLine | None = None
    ctx: CommandContext | None = None
    waitq: WaitQueue | None = None


class SoftwareCache:
    def __init__(self, sim, num_lines: int, block_size: int,
                 policy: CachePolicy | None = None, detector=None):
        self.sim = sim
        self.block_size = block_size
        self.policy = policy if policy is not None else ClockPolicy()
        self.policy.bind(num_lines)
        self.lines = [CacheLine(sim, i, block_size, detector) for i in range(num_lines)]
        self.tag_index: dict[tuple, CacheLine] = {}
        self.policy_lock = AgileLock(sim, "cachepolicy", detector)
        self.any_free_wait = WaitQueue(sim)
        self.submit = None   # generator fn(ctx, chain) wired by the system
        self.hits = 0
        self.misses = 0
        self.fills = 0
        self.writebacks = 0
        self.resets = 0

    # -------------------------------------------------------------- tracing

    def _set_state(self, line: CacheLine, new: CacheState, who: str) -> None:
        old = line.state
        line.state = new
        tag = line.tag if line.tag is not None else ("-", "-")
        self.sim.trace(who, "cache", "state",
                       (line.index, CacheState(old).name, new.name, tag[0], tag[1]))
        line.ready_wait.wake_all()

    # ----------------------------------------------------------- public ops

    def try_access_once(self, dev_idx: int, blk_idx: int, chain, buf=None):
        """One non-blocking access attempt.

        The result's kind may be RETRY (park on result.waitq, then try
        again); any returned ctx must be submitted by the caller either
        way.  Callers interleaving other coherence checks (the share
        table) use this directly so those checks rerun on every retry.
        """
        return self._try_access((dev_idx, blk_idx), chain, buf)

    def access(self, dev_idx: int, blk_idx: int, chain, buf=None):
        """Generator: route one block request through the cache.

        Returns an AccessResult whose kind is HIT, FILLING, or
        MISS_FILL_STARTED.  All contention (busy victims, exhausted lines)
        is resolved internally by parking and retrying; the caller never
        holds a lock while waiting.
        """
        key = (dev_idx, blk_idx)
        while True:
            res = self._try_access(key, chain, buf)
            if res.ctx is not None:
                yield from self.submit(res.ctx, chain)
            if res.kind is _RETRY:
                yield from res.waitq.wait(chain.task)
                continue
            return res

    def read_range(self, dev_idx: int, blk_idx: int, offset: int, size: int, chain):
        """Generator: synchronous read of bytes within one cached block."""
        while True:
            res = yield from self.access(dev_idx, blk_idx, chain)
            if res.kind is HIT:
                # no yield since access returned: the line is still valid
                return bytes(res.line.data[offset:offset + size])
            yield from res.line.ready_wait.wait(chain.task)

    def write_block(self, dev_idx: int, blk_idx: int, payload, chain):
        """Generator: install a full block and start its eager write-back.

        Returns the write-back command's barrier (completion handle); the
        caller's buffer is free for reuse as soon as this returns.
        """
        key = (dev_idx, blk_idx)
        while True:
            res = self._try_write(key, payload, chain, eager=True)
            if res.ctx is not None:
                yield from self.submit(res.ctx, chain)
            if res.kind is _RETRY:
                yield from res.waitq.wait(chain.task)
                continue
            return res.ctx.barrier if res.ctx is not None else None

    def try_write_once(self, dev_idx: int, blk_idx: int, payload, chain,
                       eager: bool = True):
        """One non-blocking write attempt; RETRY semantics as try_access_once."""
        return self._try_write((dev_idx, blk_idx), payload, chain, eager)

    def install_modified(self, dev_idx: int, blk_idx: int, payload, chain):
        """Generator: land bytes in a line and leave it MODIFIED (no device
        write until eviction or flush).  Used when share-table data drains
        back into the cache."""
        key = (dev_idx, blk_idx)
        while True:
            res = self._try_write(key, payload, chain, eager=False)
            if res.ctx is not None:
                yield from self.submit(res.ctx, chain)
            if res.kind is _RETRY:
                yield from res.waitq.wait(chain.task)
                continue
            return res.line

    def mark_modified(self, line: CacheLine, chain) -> None:
        acquire_fast(line.lock, chain)
        try:
            if line.state == CacheState.MODIFIED:
                return
            if line.state != CacheState.READY:
                raise IllegalState(
                    f"mark_modified on {CacheState(line.state).name} line")
            self._set_state(line, CacheState.MODIFIED, chain.task.name)
        finally:
            release(line.lock, chain)

    def evict(self, line: CacheLine, chain):
        """Explicit eviction request; returns (outcome, ctx-or-None).

        A returned ctx is an already-started write-back the caller must
        submit.  BUSY lines cannot be evicted and report DEFERRED.
        """
        acquire_fast(self.policy_lock, chain)
        acquire_fast(line.lock, chain)
        try:
            outcome, ctx = self._evict_locked(line, chain.task.name, next_tag=None)
            return outcome, ctx
        finally:
            release(line.lock, chain)
            release(self.policy_lock, chain)

    def flush(self, chain):
        """Generator: write back every MODIFIED line and wait for durability."""
        ctxs = []
        for line in self.lines:
            acquire_fast(self.policy_lock, chain)
            acquire_fast(line.lock, chain)
            if line.state == CacheState.MODIFIED:
                ctxs.append(self._start_writeback(line, WB_KEEP, chain.task.name))
            release(line.lock, chain)
            release(self.policy_lock, chain)
        for ctx in ctxs:
            yield from self.submit(ctx, chain)
        for ctx in ctxs:
            while not ctx.barrier.is_done:
                yield from ctx.barrier.waiters.wait(chain.task)
        return len(ctxs)

    def resident(self, dev_idx: int, blk_idx: int) -> CacheLine | None:
        return self.tag_index.get((dev_idx, blk_idx))

    # ------------------------------------------------------------ internals

    def _make_barrier(self, owner: str) -> TransactionBarrier:
        return TransactionBarrier(self.sim, owner)

    def _attach(self, line: CacheLine, buf, who: str) -> None:
        assert line.state == CacheState.BUSY, "waiters imply a BUSY line"
        line.waiters.append(buf)
        self.sim.trace(who, "cache", "attach", (line.index, len(line.waiters)))

    def _start_fill(self, line: CacheLine, key, who: str) -> CommandContext:
        dev, blk = key
        self.fills += 1
        line.busy_kind = "fill"
        self._set_state(line, CacheState.BUSY, who)
        return CommandContext(kind=FILL, dev_idx=dev, blk_idx=blk, line=line,
                              barrier=self._make_barrier(who), opcode=Opcode.READ,
                              issued_by=who)

    def _start_writeback(self, line: CacheLine, kind: str, who: str,
                         next_tag=None, refill_read: bool = False) -> CommandContext:
        dev, blk = line.tag
        self.writebacks += 1
        line.busy_kind = "wb_keep" if kind == WB_KEEP else "wb_evict"
        line.next_tag = next_tag
        ctx = CommandContext(kind=kind, dev_idx=dev, blk_idx=blk, line=line,
                             barrier=self._make_barrier(who), opcode=Opcode.WRITE,
                             issued_by=who)
        ctx.refill_read = refill_read
        self._set_state(line, CacheState.BUSY, who)
        return ctx

    def _evict_locked(self, line: CacheLine, who: str, next_tag,
                      refill_read: bool = False):
        if line.state == CacheState.BUSY:
            return DEFERRED, None
        if line.state == CacheState.READY:
            self.resets += 1
            self.sim.trace(who, "cache", "evict_reset",
                           (line.index, line.tag[0], line.tag[1]))
            del self.tag_index[line.tag]
            self._set_state(line, CacheState.INVALID, who)
            line.tag = None
            return RESET, None
        if line.state == CacheState.MODIFIED:
            self.sim.trace(who, "cache", "evict_wb",
                           (line.index, line.tag[0], line.tag[1]))
            ctx = self._start_writeback(line, WB_EVICT, who,
                                        next_tag=next_tag, refill_read=refill_read)
            return WRITEBACK_STARTED, ctx
        return RESET, None   # INVALID: nothing to do

    def _claim_victim(self, key, chain, who: str):
        """Pick and prepare a victim line for ``key``; caller holds policy lock.

        Returns (line, ctx, waitq): a ready-to-fill line, or a write-back
        ctx on a MODIFIED victim, or a wait queue when everything is busy.
        """
        tries = 0
        while True:
            idx = self.policy.map(self, key, tries)
            if idx is None:
                return None, None, self.any_free_wait
            line = self.lines[idx]
            if not line.available_as_victim():
                if self.policy.busy_eviction_choice == "find_another":
                    tries += 1
                    continue
                return None, None, line.ready_wait
            acquire_fast(line.lock, chain)
            try:
                if line.state in (CacheState.READY, CacheState.INVALID):
                    if line.state == CacheState.READY:
                        self._evict_locked(line, who, next_tag=None)
                    line.tag = key
                    line.claimed = True
                    self.tag_index[key] = line
                    self.policy.on_insert(idx)
                    return line, None, None
                # MODIFIED: write back first; fill starts on its completion
                outcome, ctx = self._evict_locked(line, who, next_tag=key,
                                                  refill_read=True)
                assert outcome == WRITEBACK_STARTED
                self.tag_index[key] = line
                self.policy.on_insert(idx)
                return line, ctx, None
            finally:
                release(line.lock, chain)

    def _try_access(self, key, chain, buf) -> AccessResult:
        who = chain.task.name
        acquire_fast(self.policy_lock, chain)
        try:
            line = self.tag_index.get(key)
            if line is not None:
                acquire_fast(line.lock, chain)
                try:
                    return self._access_resident(line, key, buf, who)
                finally:
                    release(line.lock, chain)
            # miss: need a victim
            self.misses += 1
            self.sim.trace(who, "cache", "miss", (key[0], key[1]))
            line, ctx, waitq = self._claim_victim(key, chain, who)
            if line is None:
                return AccessResult(_RETRY, waitq=waitq)
            if ctx is not None:
                # modified victim: one WRITE now, the READ after it completes
                if buf is not None:
                    acquire_fast(line.lock, chain)
                    self._attach(line, buf, who)
                    release(line.lock, chain)
                return AccessResult(MISS_FILL_STARTED, line=line, ctx=ctx)
            acquire_fast(line.lock, chain)
            try:
                line.claimed = False
                fill_ctx = self._start_fill(line, key, who)
                if buf is not None:
                    self._attach(line, buf, who)
            finally:
                release(line.lock, chain)
            return AccessResult(MISS_FILL_STARTED, line=line, ctx=fill_ctx)
        finally:
            release(self.policy_lock, chain)

    def _access_resident(self, line: CacheLine, key, buf, who: str) -> AccessResult:
        if line.tag == key:
            if line.state in (CacheState.READY, CacheState.MODIFIED):
                self.hits += 1
                self.policy.on_hit(line.index)
                self.sim.trace(who, "cache", "hit", (key[0], key[1]))
                return AccessResult(HIT, line=line)
            if line.state == CacheState.BUSY:
                if line.busy_kind == "wb_evict":
                    # the old copy is draining to the device; come back once
                    # the line is reassigned and fetch it fresh
                    return AccessResult(_RETRY, line=line, waitq=line.ready_wait)
                if buf is not None:
                    self._attach(line, buf, who)
                return AccessResult(FILLING, line=line)
            # INVALID but claimed for this key: the refill gap after a
            # write-triggered eviction; start the fill here
            assert line.claimed and line.state == CacheState.INVALID
            line.claimed = False
            ctx = self._start_fill(line, key, who)
            if buf is not None:
                self._attach(line, buf, who)
            return AccessResult(MISS_FILL_STARTED, line=line, ctx=ctx)
        if line.next_tag == key:
            # incoming tag of an eviction in progress
            if buf is not None:
                self._attach(line, buf, who)
            return AccessResult(FILLING, line=line)
        raise AssertionError("tag_index points at a line owned by another key")

    def _try_write(self, key, payload, chain, eager: bool) -> AccessResult:
        who = chain.task.name
        acquire_fast(self.policy_lock, chain)
        try:
            line = self.tag_index.get(key)
            if line is not None:
                acquire_fast(line.lock, chain)
                try:
                    if line.tag == key and line.state in (CacheState.READY,
                                                          CacheState.MODIFIED):
                        return self._install_locked(line, payload, who, eager)
                    if line.tag == key and line.state == CacheState.INVALID:
                        # claimed gap after our own eviction write-back
                        line.claimed = False
                        return self._allocate_locked(line, payload, who, eager)
                    # busy with a fill or write-back, or reassignment pending
                    return AccessResult(_RETRY, line=line, waitq=line.ready_wait)
                finally:
                    release(line.lock, chain)
            self.misses += 1
            self.sim.trace(who, "cache", "miss", (key[0], key[1]))
            line, ctx, waitq = self._claim_victim(key, chain, who)
            if line is None:
                return AccessResult(_RETRY, waitq=waitq)
            if ctx is not None:
                # modified victim drains first; retry claims the gap after
                ctx.refill_read = False
                return AccessResult(_RETRY, line=line, ctx=ctx,
                                    waitq=line.ready_wait)
            acquire_fast(line.lock, chain)
            try:
                line.claimed = False
                return self._allocate_locked(line, payload, who, eager)
            finally:
                release(line.lock, chain)
        finally:
            release(self.policy_lock, chain)

    def _trace_install(self, line: CacheLine, who: str) -> None:
        dev, blk = line.tag
        prefix = int.from_bytes(line.data[:8], "little")
        self.sim.trace(who, "cache", "install", (dev, blk, prefix))

    def _install_locked(self, line: CacheLine, payload, who: str,
                        eager: bool) -> AccessResult:
        line.data[:] = payload
        self._trace_install(line, who)
        if line.state == CacheState.READY:
            self._set_state(line, CacheState.MODIFIED, who)
        ctx = self._start_writeback(line, WB_KEEP, who) if eager else None
        return AccessResult(HIT, line=line, ctx=ctx)

    def _allocate_locked(self, line: CacheLine, payload, who: str,
                         eager: bool) -> AccessResult:
        # full-block overwrite: no device read, walk the states explicitly
        line.busy_kind = "fill"
        self._set_state(line, CacheState.BUSY, who)
        line.data[:] = payload
        self._trace_install(line, who)
        line.busy_kind = None
        self._set_state(line, CacheState.READY, who)
        self._set_state(line, CacheState.MODIFIED, who)
        ctx = self._start_writeback(line, WB_KEEP, who) if eager else None
        return AccessResult(MISS_FILL_STARTED, line=line, ctx=ctx)

    # ------------------------------------------------- completion (service)

    def complete_io(self, ctx: CommandContext, chain) -> CommandContext | None:
        """Apply a finished command to its line; called by the service.

        Returns a follow-up fill ctx when an eviction write-back must be
        chased by a read for the incoming tag.
        """
        line = ctx.line
        who = chain.task.name
        follow_up = None
        acquire_fast(self.policy_lock, chain)
        acquire_fast(line.lock, chain)
        try:
            assert line.state == CacheState.BUSY
            if ctx.kind == FILL or ctx.kind == WB_KEEP:
                line.busy_kind = None
                self._set_state(line, CacheState.READY, who)
                self._drain_waiters(line, who)
            else:   # WB_EVICT: the old tag's bytes are durable, reassign
                old = line.tag
                del self.tag_index[old]
                line.busy_kind = None
                self._set_state(line, CacheState.INVALID, who)
                incoming = line.next_tag
                line.next_tag = None
                if incoming is None:
                    line.tag = None
                else:
                    line.tag = incoming
                    line.claimed = True
                    if ctx.refill_read or line.waiters:
                        line.claimed = False
                        follow_up = self._start_fill(line, incoming, who)
        finally:
            release(line.lock, chain)
            release(self.policy_lock, chain)
        self.any_free_wait.wake_all()
        return follow_up

    def _drain_waiters(self, line: CacheLine, who: str) -> None:
        if not line.waiters:
            return
        for buf in line.waiters:
            buf.data[:] = line.data
            buf.barrier.mark_done(by_service=True)
        self.sim.trace(who, "cache", "drain", (line.index, len(line.waiters)))
        line.waiters.clear()
