"""Lock bookkeeping and debug-mode wait-for cycle detection.

Every mutual-exclusion lock in the stack is an ``AgileLock``.  Each task
carries an ``AgileLockChain`` recording the locks it currently holds, in
acquisition order.  When debug mode is on and an acquisition fails, every
held lock is marked as depending on the target lock; a reachability walk
over those dependency edges starting from the target then reports a cycle
if it reaches any lock the task already holds.

Edges are heuristic: they are added only on failed acquisitions and pruned
lazily when a lock is released, so a candidate cycle is re-validated once
(all participating locks must still be held) before it is reported.
"""

from __future__ import annotations

import itertools

from .sim_core import AtomicWord


class NotHeld(RuntimeError):
    """Release of a lock that is not in the caller's chain."""


ACQUIRED = "acquired"
BUSY = "busy"
WOULD_DEADLOCK = "would_deadlock"

_lock_ids = itertools.count()


class AgileLock:
    """Spin-style mutex word plus a parked-waiter list and dependency marks."""

    __slots__ = ("lock_id", "label", "_word", "holder", "depends_on", "waiters",
                 "_detector", "_sim")

    def __init__(self, sim, label: str, detector: "DeadlockDetector | None" = None):
        from .sim_core import WaitQueue
        self.lock_id = next(_lock_ids)
        self.label = label
        self._word = AtomicWord(0)
        self.holder = None
        self.depends_on: set[AgileLock] = set()
        self.waiters = WaitQueue(sim)
        self._detector = detector
        self._sim = sim

    def held_by(self, task) -> bool:
        return self.holder is task

    def __repr__(self):
        return f"<AgileLock {self.label}>"


class AgileLockChain:
    """Per-task ordered record of held locks."""

    __slots__ = ("task", "held")

    def __init__(self, task):
        self.task = task
        self.held: list[AgileLock] = []

    def __len__(self):
        return len(self.held)


class DeadlockDetector:
    """Owns the dependency-marking scheme and collected cycle reports."""

    def __init__(self, sim, enabled: bool = True):
        self.sim = sim
        self.enabled = enabled
        self.reports: list[tuple] = []   # (task_name, [lock labels along the cycle])

    def report_lines(self) -> list[str]:
        return [f"DEADLOCK: task {task} cycle {' -> '.join(labels)}"
                for task, labels in self.reports]

    def note_failed_acquire(self, chain: AgileLockChain, target: AgileLock):
        """Mark held-lock dependencies, then look for a wait-for cycle.

        Returns the cycle as a list of locks (first == last) or None.
        """
        if not self.enabled:
            return None
        for held in chain.held:
            held.depends_on.add(target)
        cycle = self._find_cycle(chain, target)
        if cycle is None:
            return None
        if not self._revalidate(cycle):
            return None
        labels = [lk.label for lk in cycle]
        self.reports.append((chain.task.name, labels))
        self.sim.trace(chain.task.name, "lock", "deadlock",
                       ("cycle", " -> ".join(labels)))
        return cycle

    def _find_cycle(self, chain: AgileLockChain, target: AgileLock):
        held = set(chain.held)
        if target in held:
            return [target, target]   # reachability includes the target itself
        seen = {target}
        frontier = [(target, [target])]
        while frontier:
            lock, path = frontier.pop(0)
            for nxt in sorted(lock.depends_on, key=lambda lk: lk.lock_id):
                if nxt in held:
                    return path + [nxt, target]
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append((nxt, path + [nxt]))
        return None

    @staticmethod
    def _revalidate(cycle) -> bool:
        # edges are pruned on release; a real cycle has every participant held
        return all(lk.holder is not None for lk in set(cycle))


def try_acquire(lock: AgileLock, chain: AgileLockChain):
    """Single non-blocking attempt.

    Returns ``(ACQUIRED, None)``, ``(BUSY, None)``, or
    ``(WOULD_DEADLOCK, cycle)`` when debug mode detects a wait-for cycle.
    """
    task = chain.task
    if lock._word.cas(0, task.task_id + 1):
        lock.holder = task
        chain.held.append(lock)
        lock._sim.trace(task.name, "lock", "acquire", (lock.label,))
        return ACQUIRED, None
    lock._sim.trace(task.name, "lock", "acquire_fail", (lock.label,))
    if lock._detector is not None:
        cycle = lock._detector.note_failed_acquire(chain, lock)
        if cycle is not None:
            return WOULD_DEADLOCK, cycle
    return BUSY, None


def acquire(lock: AgileLock, chain: AgileLockChain):
    """Generator: block until ``lock`` is held by ``chain.task``.

    Returns ``(ACQUIRED, first_cycle_or_None)``.  A detected cycle is
    reported and remembered but the task keeps waiting, matching the
    no-automatic-recovery policy: if the cycle is real this generator
    never returns.
    """
    first_cycle = None
    while True:
        status, cycle = try_acquire(lock, chain)
        if status is ACQUIRED:
            return ACQUIRED, first_cycle
        if cycle is not None and first_cycle is None:
            first_cycle = cycle
        yield from lock.waiters.wait(chain.task)


def acquire_fast(lock: AgileLock, chain: AgileLockChain) -> None:
    """Non-yielding acquire for critical sections that never contend.

    Deterministic mode guarantees such sections (no yields while held), so
    a failed CAS here is a protocol bug and raises.
    """
    status, _ = try_acquire(lock, chain)
    if status is not ACQUIRED:
        raise RuntimeError(f"unexpected contention on {lock.label}")


def release(lock: AgileLock, chain: AgileLockChain) -> None:
    task = chain.task
    if lock.holder is not task:
        raise NotHeld(f"{task.name} does not hold {lock.label}")
    try:
        chain.held.remove(lock)   # chain is a set for removal purposes
    except ValueError:
        raise NotHeld(f"{lock.label} missing from chain of {task.name}")
    lock.holder = None
    lock.depends_on.clear()       # lazy pruning of stale dependency edges
    lock._word.store(0)
    lock._sim.trace(task.name, "lock", "release", (lock.label,))
    lock.waiters.wake_all()
