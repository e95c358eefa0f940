"""Trace audits: protocol invariants checked over recorded runs.

Audits consume the structured records of a TraceRecorder
(time, who, module, action, details) and raise AssertionError with a
description on the first violation, so they slot directly into tests.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field


@dataclass
class QueueAuditReport:
    enqueues: int = 0
    issues: int = 0
    fetches: int = 0
    completions: int = 0
    releases: int = 0
    doorbells: int = 0
    per_sq: dict = field(default_factory=dict)


def audit_queue_protocol(records) -> QueueAuditReport:
    """Exactly-once pipeline: enqueues = issues = fetches = completions =
    releases per SQ; CID uniqueness among in-flight commands at every
    instant; strictly monotone doorbells with deltas bounded by depth."""
    rep = QueueAuditReport()
    counts = defaultdict(Counter)
    in_flight = defaultdict(set)     # sq -> set of cids between issue and release
    last_doorbell = {}
    for t, who, module, action, details in records:
        if module == "nvme":
            if action == "enqueue":
                sq = details[0]
                counts[sq]["enqueue"] += 1
            elif action == "sqe_issued":
                sq, _slot, cid = details
                counts[sq]["issued"] += 1
                assert cid not in in_flight[sq], \
                    f"t={t}: cid {cid} already in flight on sq{sq}"
                in_flight[sq].add(cid)
            elif action == "sqe_release":
                sq, _slot, cid = details
                counts[sq]["release"] += 1
                assert cid in in_flight[sq], \
                    f"t={t}: release of unknown cid {cid} on sq{sq}"
                in_flight[sq].discard(cid)
            elif action == "doorbell":
                sq, old, new, depth = details
                counts[sq]["doorbell"] += 1
                prev = last_doorbell.get(sq, 0)
                assert old == prev, f"t={t}: doorbell gap on sq{sq}"
                assert new > old, f"t={t}: doorbell not strictly increasing on sq{sq}"
                assert new - old <= depth, f"t={t}: doorbell jumped past a lap on sq{sq}"
                last_doorbell[sq] = new
        elif module == "ssd":
            if action == "fetch":
                _dev, sq, _slot, _cid = details
                counts[sq]["fetch"] += 1
            elif action == "complete":
                _dev, sq, _cid, _op, _blk = details
                counts[sq]["complete"] += 1
    for sq, c in counts.items():
        n = c["enqueue"]
        for stage in ("issued", "fetch", "complete", "release"):
            assert c[stage] == n, \
                f"sq{sq}: {stage} count {c[stage]} != enqueues {n}"
        assert not in_flight[sq], f"sq{sq}: cids leaked: {in_flight[sq]}"
        rep.per_sq[sq] = dict(c)
        rep.enqueues += c["enqueue"]
        rep.issues += c["issued"]
        rep.fetches += c["fetch"]
        rep.completions += c["complete"]
        rep.releases += c["release"]
        rep.doorbells += c["doorbell"]
    return rep


def audit_cq_windows(records, window: int = 32) -> dict:
    """Steady-state CQ doorbell moves in full windows; drain rings are
    partial (< window) and happen only after the stop marker."""
    stopped_at = None
    steady = drained = 0
    for t, who, module, action, details in records:
        if module == "svc" and action == "stop":
            stopped_at = t
        elif module == "svc" and action == "window_ring":
            _cq, old, new = details
            assert new - old == window, \
                f"t={t}: steady ring advanced {new - old}, expected {window}"
            steady += 1
        elif module == "svc" and action == "drain_ring":
            _cq, old, new = details
            assert 1 <= new - old < window, \
                f"t={t}: drain ring advanced {new - old}"
            assert stopped_at is not None and t >= stopped_at, \
                f"t={t}: drain ring before stop"
            drained += 1
    return {"steady_rings": steady, "drain_rings": drained}


_ALLOWED_TRANSITIONS = {
    ("INVALID", "BUSY"),
    ("BUSY", "READY"),
    ("READY", "MODIFIED"),
    ("MODIFIED", "BUSY"),
    ("BUSY", "INVALID"),
    ("READY", "INVALID"),
}


def audit_cache_states(records) -> int:
    """Observed line transitions stay within the allowed closure."""
    n = 0
    for t, who, module, action, details in records:
        if module == "cache" and action == "state":
            _line, old, new, _dev, _blk = details
            assert (old, new) in _ALLOWED_TRANSITIONS, \
                f"t={t}: illegal cache transition {old} -> {new}"
            n += 1
    return n


def audit_single_fill(records) -> int:
    """At most one in-flight device READ per (dev, blk) at any instant."""
    open_reads = Counter()
    fills = 0
    for t, who, module, action, details in records:
        if module == "ssd" and action == "fetch":
            continue
        if module == "nvme" and action == "enqueue":
            _sq, _slot, _cid, op, dev, blk = details
            if op == "READ":
                key = (dev, blk)
                assert open_reads[key] == 0, \
                    f"t={t}: second concurrent fill for {key}"
                open_reads[key] += 1
                fills += 1
        elif module == "ssd" and action == "complete":
            _dev, _sq, _cid, op, blk = details
            if op == "READ":
                open_reads[(_dev, blk)] -= 1
    return fills


def count_device_reads(records, dev=None, blk=None) -> int:
    n = 0
    for _t, _who, module, action, details in records:
        if module == "ssd" and action == "complete":
            d, _sq, _cid, op, b = details
            if op != "READ":
                continue
            if dev is not None and d != dev:
                continue
            if blk is not None and b != blk:
                continue
            n += 1
    return n


def count_device_writes(records, dev=None, blk=None) -> int:
    n = 0
    for _t, _who, module, action, details in records:
        if module == "ssd" and action == "complete":
            d, _sq, _cid, op, b = details
            if op != "WRITE":
                continue
            if dev is not None and d != dev:
                continue
            if blk is not None and b != blk:
                continue
            n += 1
    return n
