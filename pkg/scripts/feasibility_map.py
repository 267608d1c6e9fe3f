#!/usr/bin/env python3
"""Map the admissible leader-mass thresholds over (kappa, D)."""

import argparse
import os
import sys

from densctl.cli import main as densctl_main

HERE = os.path.dirname(os.path.abspath(__file__))


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs", help="artifact root directory")
    ap.add_argument("--jobs", type=int, default=1)
    ns = ap.parse_args(argv)
    cfg = os.path.join(HERE, "configs", "feasibility_map.cfg")
    return densctl_main(["feasibility-map", "--config", cfg, "--out", ns.out,
                         "--jobs", str(ns.jobs)])


if __name__ == "__main__":
    sys.exit(run())
