#!/usr/bin/env python3
"""Tabulate conservative basin bounds for the comparison ODE."""

import argparse
import os
import sys

from densctl.cli import main as densctl_main

HERE = os.path.dirname(os.path.abspath(__file__))


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs", help="artifact root directory")
    ns = ap.parse_args(argv)
    cfg = os.path.join(HERE, "configs", "basin_study.cfg")
    return densctl_main(["basin", "--config", cfg, "--out", ns.out])


if __name__ == "__main__":
    sys.exit(run())
