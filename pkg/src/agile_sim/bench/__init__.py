"""Benchmark drivers behind the CLI; each returns a BenchResult."""

from __future__ import annotations

from dataclasses import dataclass, field


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


@dataclass
class BenchResult:
    header: list
    rows: list
    info: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)   # (label, TraceRecorder)

    def csv_text(self) -> str:
        lines = [",".join(self.header)]
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def trace_text(self) -> str:
        chunks = []
        for label, recorder in self.traces:
            chunks.append(f"# run {label}")
            chunks.append(recorder.text().rstrip("\n"))
        return "\n".join(chunks) + "\n" if chunks else ""


def ideal_speedup(ctc: float) -> float:
    """Perfect-overlap speedup bound for a compute-to-communication ratio."""
    if ctc <= 0:
        return 1.0
    if ctc <= 1:
        return 1.0 + ctc
    return 1.0 + 1.0 / ctc
