#!/usr/bin/env python3
"""Sweep the leader mass and record steady-state follower errors.

Runs `densctl sweep-ml` with the weak- or strong-interaction scenario
config.  The strong scenario integrates with dt = 4e-4 and takes roughly
an hour serially; use --jobs to fan the points out.
"""

import argparse
import os
import sys

from densctl.cli import main as densctl_main

HERE = os.path.dirname(os.path.abspath(__file__))


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", choices=("weak", "strong"), default="weak")
    ap.add_argument("--out", default="runs", help="artifact root directory")
    ap.add_argument("--jobs", type=int, default=1)
    ns = ap.parse_args(argv)
    cfg = os.path.join(HERE, "configs", f"ml_sweep_{ns.scenario}.cfg")
    return densctl_main(["sweep-ml", "--config", cfg, "--out", ns.out,
                         "--jobs", str(ns.jobs)])


if __name__ == "__main__":
    sys.exit(run())
