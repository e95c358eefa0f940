#!/usr/bin/env python3
"""4 KiB random read and write bandwidth vs in-flight count.

Runs the read sweep for 1..3 devices and the single-device write sweep,
printing CSV blocks.  Accepts the same flags as the CLI after a `--`.
"""

import sys

from agile_sim.bench.bandwidth import run_rand_rw
from agile_sim.cli import build_config


def main() -> int:
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    for devices in (1, 2, 3):
        cfg = build_config("rand_read", seed=seed)
        cfg.system.num_devices = devices
        cfg.concurrency_points = tuple(p * devices
                                       for p in (1, 2, 4, 8, 16, 32, 64, 96))
        res = run_rand_rw(cfg, write=False)
        print(f"# random read, {devices} device(s)")
        sys.stdout.write(res.csv_text())
    cfg = build_config("rand_write", seed=seed)
    res = run_rand_rw(cfg, write=True)
    print("# random write, 1 device")
    sys.stdout.write(res.csv_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
