"""Coherence for user-owned buffers.

An open-addressed hashtable maps (device, block) to the single live user
buffer holding that block.  Instead of copying data between threads, later
requesters receive a pointer to the first registrant's buffer and a
reference count tracks usage; states follow a refcount-collapsed MOESI
reading: Exclusive (one user), Shared (several), Modified (buffer diverges
from the cache/device).

The table outranks the software cache: callers consult it before any
cache access, so a buffer filled straight from the device stays coherent
with cache-side writes.  On the final release of a Modified entry the
releasing task installs the buffer's bytes into the software cache as a
MODIFIED line before the entry disappears; if the original owner already
finished, that duty lands on the last releaser and the transfer is
flagged in the trace.
"""

from __future__ import annotations

from .lock_chain import AgileLock, acquire_fast, release


class NotRegistered(RuntimeError):
    """Operation on a (device, block) key the table does not track."""


class DoubleRelease(RuntimeError):
    """Release by a task that holds no reference."""


EXCLUSIVE = "Exclusive"
SHARED = "Shared"
MODIFIED = "Modified"

_TOMB = object()   # deleted slot; probing continues across it


class ShareEntry:
    __slots__ = ("key", "buf", "owner", "state", "refcount", "holders", "retiring")

    def __init__(self, key, buf, owner: str):
        self.key = key
        self.buf = buf
        self.owner = owner
        self.state = EXCLUSIVE
        self.refcount = 1
        self.holders = [owner]    # multiset of task names
        self.retiring = False


class ShareTable:
    def __init__(self, sim, buckets: int, cache, detector=None):
        if buckets < 2 or buckets & (buckets - 1):
            raise ValueError("buckets must be a power of two >= 2")
        self.sim = sim
        self.cache = cache
        self.buckets = buckets
        self.slots: list = [None] * buckets
        self.locks = [AgileLock(sim, f"bucket{i}", detector) for i in range(buckets)]
        self.registers = 0
        self.releases = 0

    # -------------------------------------------------------------- hashing

    def _home(self, key) -> int:
        dev, blk = key
        return (dev * 0x9E3779B1 ^ blk * 0x85EBCA77) & (self.buckets - 1)

    def _find(self, key):
        """Linear probe; returns (entry_idx or None, first insertable idx)."""
        insert_at = None
        idx = self._home(key)
        for _ in range(self.buckets):
            slot = self.slots[idx]
            if slot is None:
                return None, idx if insert_at is None else insert_at
            if slot is _TOMB:
                if insert_at is None:
                    insert_at = idx
            elif slot.key == key:
                return idx, None
            idx = (idx + 1) & (self.buckets - 1)
        return None, insert_at

    def _entry(self, key) -> ShareEntry | None:
        idx, _ = self._find(key)
        return self.slots[idx] if idx is not None else None

    # ------------------------------------------------------------------ ops

    def lookup_or_register(self, dev: int, blk: int, my_buf, chain):
        """Return (buffer, registered).

        Absent key: my_buf becomes the tracked buffer, Exclusive, and the
        caller owns the fill.  Present key: the existing buffer is shared
        and its reference count bumped.  Either way the caller holds one
        reference it must release.
        """
        key = (dev, blk)
        task = chain.task.name
        lock = self.locks[self._home(key)]
        acquire_fast(lock, chain)
        try:
            found, insert_at = self._find(key)
            if found is not None:
                entry = self.slots[found]
                entry.refcount += 1
                entry.holders.append(task)
                entry.retiring = False
                if entry.state == EXCLUSIVE:
                    entry.state = SHARED
                self.sim.trace(task, "table", "share",
                               (dev, blk, entry.refcount, entry.state))
                return entry.buf, False
            if insert_at is None:
                raise RuntimeError("share table is full; raise buckets")
            self.slots[insert_at] = ShareEntry(key, my_buf, task)
            self.registers += 1
            self.sim.trace(task, "table", "register", (dev, blk))
            return my_buf, True
        finally:
            release(lock, chain)

    def acquire_if_present(self, dev: int, blk: int, chain):
        """Take a reference on an existing entry; None when untracked."""
        key = (dev, blk)
        task = chain.task.name
        lock = self.locks[self._home(key)]
        acquire_fast(lock, chain)
        try:
            entry = self._entry(key)
            if entry is None:
                return None
            entry.refcount += 1
            entry.holders.append(task)
            entry.retiring = False
            if entry.state == EXCLUSIVE:
                entry.state = SHARED
            self.sim.trace(task, "table", "share", (dev, blk, entry.refcount, entry.state))
            return entry.buf
        finally:
            release(lock, chain)

    def mark_buffer_modified(self, dev: int, blk: int, task_name: str) -> None:
        entry = self._entry((dev, blk))
        if entry is None:
            raise NotRegistered(f"({dev}, {blk}) not in the share table")
        if task_name not in entry.holders:
            raise NotRegistered(f"{task_name} holds no reference on ({dev}, {blk})")
        entry.state = MODIFIED
        self.sim.trace(task_name, "table", "modified", (dev, blk))

    def release(self, dev: int, blk: int, chain):
        """Generator: drop one reference; the last one propagates Modified data.

        Propagation installs the buffer's bytes into the software cache as
        a MODIFIED line, outside the bucket lock; a lookup arriving in that
        window revives the entry instead of missing.
        """
        key = (dev, blk)
        task = chain.task.name
        lock = self.locks[self._home(key)]
        acquire_fast(lock, chain)
        entry = self._entry(key)
        if entry is None:
            release(lock, chain)
            raise NotRegistered(f"({dev}, {blk}) not in the share table")
        if task not in entry.holders:
            release(lock, chain)
            raise DoubleRelease(f"{task} holds no reference on ({dev}, {blk})")
        entry.holders.remove(task)
        entry.refcount -= 1
        self.releases += 1
        self.sim.trace(task, "table", "release", (dev, blk, entry.refcount))
        if entry.refcount > 0:
            release(lock, chain)
            return
        entry.retiring = True
        modified = entry.state == MODIFIED
        snapshot = bytes(entry.buf.data) if modified else None
        release(lock, chain)

        if modified:
            if entry.owner != task:
                self.sim.trace(task, "table", "duty_transfer", (dev, blk, entry.owner))
            yield from self.cache.install_modified(dev, blk, snapshot, chain)
            self.sim.trace(task, "table", "propagate", (dev, blk))

        acquire_fast(lock, chain)
        try:
            idx, _ = self._find(key)
            if idx is not None and self.slots[idx] is entry and entry.retiring:
                if entry.refcount == 0:
                    self.slots[idx] = _TOMB
        finally:
            release(lock, chain)

    def live_entries(self) -> int:
        return sum(1 for s in self.slots if s is not None and s is not _TOMB)
