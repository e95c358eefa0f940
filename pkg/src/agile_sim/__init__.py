"""Deterministic simulator of an asynchronous GPU-centric NVMe I/O stack:
queue-pair protocol, completion-polling service, software cache with a
share table, lock-chain deadlock detection, and a benchmark CLI."""

from .config import ExperimentConfig, SystemConfig
from .sim_core import Simulator, TraceRecorder
from .system import AgileSystem

__all__ = ["AgileSystem", "ExperimentConfig", "Simulator", "SystemConfig",
           "TraceRecorder"]
