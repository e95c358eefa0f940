"""Deterministic discrete-event substrate.

A virtual nanosecond clock plus cooperative generator tasks stand in for
GPU user threads, service warps, and SSD firmware.  Every state change in
a run is driven by an event on a single seeded heap, so one (config, seed)
pair replays to a bit-identical trace.

Tasks are plain generators.  They yield ``Delay(ns)`` to advance virtual
time while staying runnable, or ``PARK`` to block until another component
calls ``Simulator.wake``.  There is no preemption: code between two yields
executes atomically with respect to every other task.
"""

from __future__ import annotations

import heapq
import random
import threading
from collections import deque
from dataclasses import dataclass


class LivelockSuspected(RuntimeError):
    """Event budget exhausted without any task making progress."""


RUNNABLE = "runnable"
BLOCKED = "blocked"
FINISHED = "finished"

# Yield sentinel: park the task until an explicit wake.
PARK = object()


@dataclass(frozen=True)
class Delay:
    """Yielded by a task to resume after ``ns`` simulated nanoseconds."""

    ns: int


class AtomicWord:
    """Integer cell mutated only through load/store/CAS.

    Deterministic runs never actually contend, but all protocol state words
    (SQE locks, doorbells, barrier flags) go through this cell so the same
    transition code can run unchanged under real threads in stress tests.
    """

    __slots__ = ("_value", "_guard")

    def __init__(self, value: int = 0):
        self._value = value
        self._guard = threading.Lock()

    def load(self) -> int:
        return self._value

    def store(self, value: int) -> None:
        with self._guard:
            self._value = value

    def cas(self, expect: int, new: int) -> bool:
        with self._guard:
            if self._value != expect:
                return False
            self._value = new
            return True

    def add(self, delta: int) -> int:
        """Fetch-and-add; returns the previous value."""
        with self._guard:
            old = self._value
            self._value = old + delta
            return old

    def __repr__(self):
        return f"AtomicWord({self._value})"


class SimTask:
    """A cooperative task: a generator plus scheduling state."""

    __slots__ = ("task_id", "name", "kind", "state", "lane", "warp",
                 "_gen", "_finish_waiters")

    def __init__(self, task_id: int, name: str, kind: str):
        self.task_id = task_id
        self.name = name
        self.kind = kind          # user_thread | service_warp | ssd_engine
        self.state = RUNNABLE
        self.lane = None          # set when the task belongs to a warp
        self.warp = None
        self._gen = None
        self._finish_waiters = []

    @property
    def finished(self) -> bool:
        return self.state is FINISHED

    def join(self, waiter: "SimTask"):
        """Generator: park ``waiter`` until this task finishes."""
        while self.state is not FINISHED:
            self._finish_waiters.append(waiter)
            yield PARK

    def __repr__(self):
        return f"<SimTask {self.name} {self.state}>"


class WaitQueue:
    """FIFO list of parked tasks with broadcast wake.

    Callers always re-check their condition after waking, so a spurious
    wake is harmless and only ``wake_all`` is offered.
    """

    __slots__ = ("_sim", "_waiters")

    def __init__(self, sim: "Simulator"):
        self._sim = sim
        self._waiters = deque()

    def wait(self, task: SimTask):
        """Generator: park ``task`` here until the next wake_all."""
        self._waiters.append(task)
        yield PARK

    def wake_all(self) -> int:
        n = len(self._waiters)
        while self._waiters:
            self._sim.wake(self._waiters.popleft())
        return n

    def __len__(self):
        return len(self._waiters)


class Rendezvous:
    """Reusable all-parties barrier for lockstep phases."""

    __slots__ = ("_wq", "parties", "_arrived", "_generation")

    def __init__(self, sim: "Simulator", parties: int):
        self._wq = WaitQueue(sim)
        self.parties = parties
        self._arrived = 0
        self._generation = 0

    def wait(self, task: SimTask):
        gen = self._generation
        self._arrived += 1
        if self._arrived >= self.parties:
            self._arrived = 0
            self._generation += 1
            self._wq.wake_all()
            return
        while self._generation == gen:
            yield from self._wq.wait(task)


class TraceRecorder:
    """Collects (time, who, module, action, details) tuples.

    Records are kept structured so audits stay cheap; ``lines()`` renders
    the line-oriented text form ``<time_ns> <task> <module> <action> <details>``.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def emit(self, t: int, who: str, module: str, action: str, details: tuple):
        self.records.append((t, who, module, action, details))

    def lines(self):
        for t, who, module, action, details in self.records:
            tail = " ".join(str(d) for d in details)
            yield f"{t} {who} {module} {action} {tail}".rstrip()

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def by_action(self, module: str, action: str):
        return [r for r in self.records if r[2] == module and r[3] == action]


@dataclass
class SimStats:
    final_clock: int
    events: int
    tasks_blocked: int     # tasks not finished when the run stopped
    tasks_parked: int      # subset of the above that are waiting on a wake
    tasks_finished: int
    tasks_total: int


class Simulator:
    """Seeded event loop with a monotone virtual clock."""

    def __init__(self, seed: int = 0, random_ties: bool = False,
                 livelock_budget: int = 5_000_000,
                 recorder: TraceRecorder | None = None):
        self.now = 0
        self.seed = seed
        self.recorder = recorder
        self.tasks: list[SimTask] = []
        self._heap = []
        self._seq = 0
        self._tie_rng = random.Random(f"{seed}:ties")
        self._random_ties = random_ties
        self._budget = livelock_budget
        self._since_progress = 0
        self._events = 0

    # ------------------------------------------------------------------ rng

    def derive_rng(self, label: str) -> random.Random:
        """Independent deterministic stream for one component."""
        return random.Random(f"{self.seed}:{label}")

    # --------------------------------------------------------------- events

    def schedule(self, action, delay_ns: int = 0, *args) -> int:
        if delay_ns < 0:
            raise ValueError("delay_ns must be non-negative")
        self._seq += 1
        tie = self._tie_rng.random() if self._random_ties else 0.0
        heapq.heappush(self._heap, (self.now + delay_ns, tie, self._seq, action, args))
        return self._seq

    def _progress(self) -> None:
        self._since_progress = 0

    # ---------------------------------------------------------------- tasks

    def spawn(self, name: str, gen, kind: str = "user_thread") -> SimTask:
        task = SimTask(len(self.tasks), name, kind)
        task._gen = gen
        self.tasks.append(task)
        self.trace(name, "sim", "spawn", (kind,))
        self.schedule(self._step, 0, task)
        return task

    def wake(self, task: SimTask) -> None:
        if task.state is BLOCKED:
            task.state = RUNNABLE
            self._progress()
            self.schedule(self._step, 0, task)

    def _step(self, task: SimTask) -> None:
        if task.state is FINISHED:
            return
        try:
            out = task._gen.send(None)
        except StopIteration:
            task.state = FINISHED
            self._progress()
            self.trace(task.name, "sim", "finish", ())
            for waiter in task._finish_waiters:
                self.wake(waiter)
            task._finish_waiters.clear()
            return
        if out is PARK:
            task.state = BLOCKED
            self._progress()
        elif isinstance(out, Delay):
            self.schedule(self._step, out.ns, task)
        else:
            raise TypeError(f"task {task.name} yielded {out!r}")

    # ----------------------------------------------------------------- runs

    def run_until_quiescent(self, limit_ns: int | None = None) -> SimStats:
        heap = self._heap
        while heap:
            t = heap[0][0]
            if limit_ns is not None and t > limit_ns:
                break
            t, _tie, _seq, action, args = heapq.heappop(heap)
            assert t >= self.now, "clock must never decrease"
            self.now = t
            self._events += 1
            self._since_progress += 1
            if self._budget and self._since_progress > self._budget:
                raise LivelockSuspected(
                    f"{self._budget} events without task progress at t={self.now}")
            action(*args)
        return self.stats()

    def stats(self) -> SimStats:
        blocked = sum(1 for t in self.tasks if t.state is not FINISHED)
        parked = sum(1 for t in self.tasks if t.state is BLOCKED)
        done = sum(1 for t in self.tasks if t.state is FINISHED)
        return SimStats(final_clock=self.now, events=self._events,
                        tasks_blocked=blocked, tasks_parked=parked,
                        tasks_finished=done, tasks_total=len(self.tasks))

    # ---------------------------------------------------------------- trace

    def trace(self, who: str, module: str, action: str, details: tuple = ()) -> None:
        if self.recorder is not None:
            self.recorder.emit(self.now, who, module, action, details)
