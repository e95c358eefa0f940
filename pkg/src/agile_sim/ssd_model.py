"""Simulated NVMe SSD.

The device fetches commands after doorbell updates, runs them through a
configurable latency/parallelism model against a sparse block store, and
posts completions while respecting completion-queue capacity: when the
host stops ringing the CQ doorbell, finished commands pile up inside the
device and throughput collapses, exactly the backpressure the polling
service exists to relieve.

Default calibration targets a per-device saturation plateau of about
3.7 GB/s for 4 KiB reads and 2.2 GB/s for writes (parallelism 16 with
read/write service times of 17712 / 29789 ns).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .nvme_queue import (CompletionQueue, NvmeCommand, Opcode, ProtocolViolation,
                         SqState, SubmissionQueue)


class OutOfRange(ValueError):
    """Block index beyond the device's capacity."""


@dataclass
class LatencyModel:
    """Service-time model for one device.

    Each command occupies one of ``parallelism`` channels for its service
    time; the completion is posted when service ends, so the sustained
    rate ceiling is parallelism / service_time.  ``per_channel_rate``
    (commands/sec) optionally decouples channel occupancy from latency
    for pipelined channels.
    """

    read_base_ns: int = 17712
    write_base_ns: int = 29789
    jitter: str = "none"          # none | uniform | exponential
    jitter_ns: int = 0
    per_channel_rate: float | None = None

    def service_ns(self, opcode: Opcode, rng) -> int:
        base = self.read_base_ns if opcode == Opcode.READ else self.write_base_ns
        if self.jitter == "none" or self.jitter_ns <= 0:
            return base
        if self.jitter == "uniform":
            return base + rng.randrange(self.jitter_ns)
        if self.jitter == "exponential":
            return base + int(rng.expovariate(1.0 / self.jitter_ns))
        raise ValueError(f"unknown jitter kind {self.jitter!r}")

    def occupancy_ns(self, service_ns: int) -> int:
        if self.per_channel_rate:
            return max(1, int(1e9 / self.per_channel_rate))
        return service_ns


class BlockStore:
    """Sparse in-memory block storage; unwritten blocks read back as zeros."""

    def __init__(self, num_blocks: int, block_size: int = 4096):
        self.num_blocks = num_blocks
        self.block_size = block_size
        self._blocks: dict[int, bytes] = {}
        self._zero = bytes(block_size)

    def _check(self, blk_idx: int) -> None:
        if not 0 <= blk_idx < self.num_blocks:
            raise OutOfRange(f"block {blk_idx} out of range [0, {self.num_blocks})")

    def read_block(self, blk_idx: int) -> bytes:
        self._check(blk_idx)
        return self._blocks.get(blk_idx, self._zero)

    def write_block(self, blk_idx: int, payload) -> None:
        self._check(blk_idx)
        if len(payload) != self.block_size:
            raise ValueError("payload must be exactly one block")
        self._blocks[blk_idx] = bytes(payload)

    def load_image(self, path) -> None:
        """Raw little-endian block image: offset = blk_idx * block_size."""
        with open(path, "rb") as fh:
            blk = 0
            while blk < self.num_blocks:
                chunk = fh.read(self.block_size)
                if not chunk:
                    break
                if len(chunk) < self.block_size:
                    chunk = chunk + bytes(self.block_size - len(chunk))
                self._blocks[blk] = chunk
                blk += 1

    def save_image(self, path) -> None:
        top = max(self._blocks, default=-1) + 1
        with open(path, "wb") as fh:
            for blk in range(top):
                fh.write(self._blocks.get(blk, self._zero))


class SsdDevice:
    """One simulated SSD bound to a set of queue pairs."""

    def __init__(self, sim, dev_idx: int, store: BlockStore,
                 latency: LatencyModel, parallelism: int, timing):
        self.sim = sim
        self.dev_idx = dev_idx
        self.store = store
        self.latency = latency
        self.parallelism = parallelism
        self.timing = timing
        self.block_size = store.block_size
        self.name = f"dev{dev_idx}"
        self.rng = sim.derive_rng(f"dev{dev_idx}")
        self.sqs: dict[int, SubmissionQueue] = {}
        self.cqs: dict[int, CompletionQueue] = {}
        self._fetched: dict[int, int] = {}        # sq_idx -> virtual fetch point
        self._busy = 0
        self._backlog = deque()                    # commands waiting for a channel
        self._stalled: dict[int, deque] = {}       # cq_idx -> finished, no CQE room
        # counters for bandwidth sampling and audits
        self.fetched_count = 0
        self.completed_count = 0
        self.bytes_read = 0
        self.bytes_written = 0

    def bind_queue_pair(self, sq: SubmissionQueue, cq: CompletionQueue) -> None:
        self.sqs[sq.sq_idx] = sq
        self.cqs[cq.cq_idx] = cq
        self._fetched[sq.sq_idx] = 0
        self._stalled.setdefault(cq.cq_idx, deque())

    # ----------------------------------------------------------- host -> dev

    def on_sq_doorbell(self, sq_idx: int, new_tail: int) -> None:
        """Doorbell write arrives; fetch the newly published range."""
        self.sim.schedule(self._fetch, self.timing.fetch_ns, sq_idx, new_tail)

    def on_cq_doorbell(self, cq_idx: int, _new_head: int) -> None:
        cq = self.cqs[cq_idx]
        stalled = self._stalled[cq_idx]
        while stalled and cq.device_can_post():
            cid, sq_idx = stalled.popleft()
            cq.device_post(cid, sq_idx, 0, self.name)

    # ------------------------------------------------------------- internals

    def _fetch(self, sq_idx: int, new_tail: int) -> None:
        sq = self.sqs[sq_idx]
        v = self._fetched[sq_idx]
        if new_tail <= v:
            return   # a later doorbell already covered this range
        for i in range(v, new_tail):
            entry = sq.entries[i % sq.depth]
            if entry.state.load() != SqState.ISSUED:
                raise ProtocolViolation(
                    f"device fetched non-ISSUED SQE sq{sq_idx} slot {i % sq.depth}")
            cmd = entry.cmd
            self.fetched_count += 1
            self.sim.trace(self.name, "ssd", "fetch",
                           (self.dev_idx, sq_idx, i % sq.depth, cmd.cid))
            self._dispatch(cmd, sq_idx)
        self._fetched[sq_idx] = new_tail

    def _dispatch(self, cmd: NvmeCommand, sq_idx: int) -> None:
        if self._busy < self.parallelism:
            self._busy += 1
            self._start(cmd, sq_idx)
        else:
            self._backlog.append((cmd, sq_idx))

    def _start(self, cmd: NvmeCommand, sq_idx: int) -> None:
        service = self.latency.service_ns(cmd.opcode, self.rng)
        occupancy = self.latency.occupancy_ns(service)
        self.sim.schedule(self._free_channel, occupancy)
        self.sim.schedule(self._execute, service, cmd, sq_idx)

    def _free_channel(self) -> None:
        self._busy -= 1
        if self._backlog and self._busy < self.parallelism:
            self._busy += 1
            cmd, sq_idx = self._backlog.popleft()
            self._start(cmd, sq_idx)

    def _execute(self, cmd: NvmeCommand, sq_idx: int) -> None:
        if cmd.opcode == Opcode.READ:
            payload = self.store.read_block(cmd.blk_idx)
            if cmd.dest is not None:
                cmd.dest.data[:] = payload   # DMA into the cache line
            self.bytes_read += cmd.nbytes
        else:
            self.store.write_block(cmd.blk_idx, bytes(cmd.dest.data))
            self.bytes_written += cmd.nbytes
        self.completed_count += 1
        self.sim.trace(self.name, "ssd", "complete",
                       (self.dev_idx, sq_idx, cmd.cid, cmd.opcode.name, cmd.blk_idx))
        cq = self.cqs[self.sqs[sq_idx].cq_idx]
        if cq.device_can_post():
            cq.device_post(cmd.cid, sq_idx, 0, self.name)
        else:
            # host is not consuming: completions queue inside the device
            self.sim.trace(self.name, "ssd", "cqe_stall", (cq.cq_idx, cmd.cid, sq_idx))
            self._stalled[cq.cq_idx].append((cmd.cid, sq_idx))
