#!/usr/bin/env python3
"""Naive vs service-assisted issuing at SQ depth 2 with 4 tasks."""

import sys

from agile_sim.cli import main

if __name__ == "__main__":
    sys.exit(main(["deadlock_demo"] + sys.argv[1:]))
