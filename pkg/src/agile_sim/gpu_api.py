"""Thread-facing surface: prefetch, async read/write with barriers, and
array-like synchronous access, plus warp-level request coalescing.

Simulated user tasks call these as generators (``yield from``).  A task
group of up to 32 lanes forms a UserWarp; warps advance in lockstep at
coalescing points so duplicate prefetches collapse to one leader per
unique block before the shared cache is touched.  Reads and writes via
``async_read`` / ``async_write`` deliberately skip warp coalescing: each
caller keeps its own copy, and redundancy is filtered at the cache level
(or by the share table when it is enabled).
"""

from __future__ import annotations

from .agile_service import TransactionBarrier
from .sim_core import WaitQueue
from .software_cache import HIT, RETRY
from .ssd_model import OutOfRange


class BufferBusy(RuntimeError):
    """Buffer reused while its previous transfer is still pending."""


class AgileBuf:
    """User-owned block buffer plus the barrier guarding its last transfer."""

    __slots__ = ("data", "barrier", "bound_key")

    def __init__(self, block_size: int):
        self.data = bytearray(block_size)
        self.barrier: TransactionBarrier | None = None
        self.bound_key = None

    @property
    def ready(self) -> bool:
        return self.barrier is None or self.barrier.is_done


def warp_coalesce(requests):
    """Collapse duplicate (lane, key) requests.

    ``requests`` is a list of (lane, key-or-None); None marks a divergent
    lane with nothing to ask for.  Returns (unique_keys, leaders) where
    leaders maps each unique key to the lowest lane that carries it.
    """
    leaders: dict = {}
    for lane, key in requests:
        if key is None:
            continue
        if key not in leaders or lane < leaders[key]:
            leaders[key] = lane
    uniques = sorted(leaders, key=lambda k: leaders[k])
    return uniques, leaders


class UserWarp:
    """Up to 32 lanes advancing in lockstep at coalescing points."""

    def __init__(self, sim, warp_id: int):
        self.sim = sim
        self.warp_id = warp_id
        self.lanes: list = []
        self._active = 0
        self._arrivals: dict[int, object] = {}
        self._generation = 0
        self._results: dict[int, dict] = {}
        self._wq = WaitQueue(sim)

    @property
    def size(self) -> int:
        return self._active

    def add_lane(self, task) -> None:
        if len(self.lanes) >= 32:
            raise ValueError("a warp holds at most 32 lanes")
        task.lane = len(self.lanes)
        task.warp = self
        self.lanes.append(task)
        self._active += 1

    def deactivate(self, task) -> None:
        self._active -= 1
        if self._arrivals and len(self._arrivals) >= self._active > 0:
            self._conclude()

    def rendezvous(self, task, key):
        """Generator: lockstep sync; returns True iff this lane leads ``key``."""
        gen = self._generation
        self._arrivals[task.lane] = key
        if len(self._arrivals) >= self._active:
            self._conclude()
        else:
            while self._generation == gen:
                yield from self._wq.wait(task)
        return self._results[gen].get(task.lane, False)

    def _conclude(self) -> None:
        _, leaders = warp_coalesce(list(self._arrivals.items()))
        result = {lane: True for lane in leaders.values()}
        self._results[self._generation] = result
        self._results.pop(self._generation - 2, None)
        self._generation += 1
        self._arrivals = {}
        self._wq.wake_all()


class AgileApi:
    """Controller facade bound to one assembled system."""

    def __init__(self, system):
        self.system = system
        self.sim = system.sim
        self.cache = system.cache
        self.table = system.table

    # -------------------------------------------------------------- helpers

    def make_buf(self) -> AgileBuf:
        return AgileBuf(self.system.block_size)

    def _check_block(self, dev: int, blk: int) -> None:
        if not 0 <= dev < len(self.system.devices):
            raise OutOfRange(f"no device {dev}")
        if not 0 <= blk < self.system.devices[dev].store.num_blocks:
            raise OutOfRange(f"device {dev} has no block {blk}")

    def _require_service(self) -> None:
        assert self.system.service.started, \
            "the completion service must be started before issuing commands"

    def _fresh_barrier(self, buf: AgileBuf, owner: str, done: bool = False) -> None:
        if not buf.ready:
            raise BufferBusy("buffer has a pending transfer; wait() it first")
        buf.barrier = TransactionBarrier(self.sim, owner, done=done)

    # ------------------------------------------------------------------ ops

    def prefetch(self, dev: int, blk: int, chain):
        """Generator: pull one block toward the cache, without waiting.

        Warp members rendezvous first so only the lowest lane per unique
        block forwards the request; duplicates die before touching the
        cache's critical sections.
        """
        self._require_service()
        self._check_block(dev, blk)
        task = chain.task
        self.sim.trace(task.name, "api", "prefetch", (dev, blk))
        if task.warp is not None and task.warp.size > 1:
            is_leader = yield from task.warp.rendezvous(task, (dev, blk))
            if not is_leader:
                return None
        res = yield from self.cache.access(dev, blk, chain)
        return res

    def prefetch_skip(self, chain):
        """Generator: lockstep filler for a lane with nothing to prefetch."""
        task = chain.task
        if task.warp is not None and task.warp.size > 1:
            yield from task.warp.rendezvous(task, None)
        return None

    def async_read(self, dev: int, blk: int, buf: AgileBuf, chain):
        """Generator: start filling ``buf`` from (dev, blk); returns the
        effective buffer, which is a previously registered task's buffer
        when the share table already tracks the block.

        No warp coalescing here: every caller gets its own copy unless the
        share table deduplicates.  Wait on the returned buffer before
        reading it.
        """
        self._require_service()
        self._check_block(dev, blk)
        task = chain.task
        self.sim.trace(task.name, "api", "async_read", (dev, blk))
        if self.table is not None:
            self._fresh_barrier(buf, task.name)
            shared, registered = self.table.lookup_or_register(dev, blk, buf, chain)
            if not registered:
                buf.barrier = None
                return shared
        else:
            self._fresh_barrier(buf, task.name)
        buf.bound_key = (dev, blk)
        res = yield from self.cache.access(dev, blk, chain, buf=buf)
        if res.kind is HIT:
            buf.data[:] = res.line.data
            buf.barrier.mark_done(by_service=False)
        return buf

    def async_write(self, dev: int, blk: int, buf: AgileBuf, chain):
        """Generator: publish a full block from ``buf``.

        The bytes land in the owning cache line, the line goes MODIFIED,
        and a device write is issued eagerly; ``buf`` is reusable the
        moment this returns.  Returns the write-back barrier (durability
        handle) or None when the share table absorbed the write.
        """
        self._require_service()
        self._check_block(dev, blk)
        task = chain.task
        if not buf.ready:
            raise BufferBusy("buffer has a pending transfer; wait() it first")
        self.sim.trace(task.name, "api", "async_write", (dev, blk))
        payload = bytes(buf.data)
        # the table outranks the cache, and the check must rerun after any
        # wait: a reader may register this block while we are parked
        while True:
            if self.table is not None:
                shared = self.table.acquire_if_present(dev, blk, chain)
                if shared is not None:
                    while not shared.ready:
                        yield from shared.barrier.waiters.wait(task)
                    shared.data[:] = payload
                    self.sim.trace(task.name, "api", "write_commit",
                                   (dev, blk, int.from_bytes(payload[:8], "little")))
                    self.table.mark_buffer_modified(dev, blk, task.name)
                    yield from self.table.release(dev, blk, chain)
                    return None
            res = self.cache.try_write_once(dev, blk, payload, chain)
            if res.ctx is not None:
                yield from self.cache.submit(res.ctx, chain)
            if res.kind is RETRY:
                yield from res.waitq.wait(task)
                continue
            return res.ctx.barrier if res.ctx is not None else None

    def release_shared(self, dev: int, blk: int, chain):
        """Generator: drop this task's share-table reference."""
        yield from self.table.release(dev, blk, chain)

    def wait(self, handle, chain):
        """Generator: block until a buffer's (or barrier's) transfer is done.

        The caller must hold no locks: waiting happens purely on the
        barrier, which the service clears.
        """
        task = chain.task
        if chain.held:
            held = [lk.label for lk in chain.held]
            self.system.hygiene_violations.append((task.name, held))
            raise RuntimeError(f"{task.name} waits on a barrier holding {held}")
        barrier = handle.barrier if isinstance(handle, AgileBuf) else handle
        if barrier is None:
            return
        while not barrier.is_done:
            yield from barrier.waiters.wait(task)

    def array_get(self, dev: int, idx: int, chain, elem_size: int = 4):
        """Generator: synchronous element read, viewing the device as a
        little-endian array of fixed-size elements."""
        self._require_service()
        if self.system.block_size % elem_size:
            raise ValueError("element size must divide the block size")
        byte_off = idx * elem_size
        blk, off = divmod(byte_off, self.system.block_size)
        self._check_block(dev, blk)
        task = chain.task
        if self.table is None:
            data = yield from self.cache.read_range(dev, blk, off, elem_size, chain)
            return int.from_bytes(data, "little")
        while True:
            # table first, re-checked after every wait
            shared = self.table.acquire_if_present(dev, blk, chain)
            if shared is not None:
                while not shared.ready:
                    yield from shared.barrier.waiters.wait(task)
                value = int.from_bytes(shared.data[off:off + elem_size], "little")
                yield from self.table.release(dev, blk, chain)
                return value
            res = self.cache.try_access_once(dev, blk, chain)
            if res.ctx is not None:
                yield from self.cache.submit(res.ctx, chain)
            if res.kind is HIT:
                return int.from_bytes(res.line.data[off:off + elem_size], "little")
            waitq = res.waitq if res.waitq is not None else res.line.ready_wait
            yield from waitq.wait(task)
