#!/usr/bin/env python3
"""Queue-pair and cache-size sensitivity of the synthetic gather workload."""

import sys

from agile_sim.bench.sweeps import run_cache_sweep, run_queue_sweep
from agile_sim.cli import build_config


def main() -> int:
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    print("# queue-pair sweep (depth 64)")
    sys.stdout.write(run_queue_sweep(build_config("queue_sweep", seed=seed)).csv_text())
    print("# cache-size sweep")
    sys.stdout.write(run_cache_sweep(build_config("cache_sweep", seed=seed)).csv_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
