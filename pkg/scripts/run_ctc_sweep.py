#!/usr/bin/env python3
"""Async-over-sync speedup across compute-to-communication ratios."""

import sys

from agile_sim.cli import main

if __name__ == "__main__":
    sys.exit(main(["ctc_sweep"] + sys.argv[1:]))
