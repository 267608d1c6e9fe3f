#!/usr/bin/env python3
"""Run the closed-loop regulation trial (weak-interaction scenario).

Thin wrapper over `densctl macro` with the shipped config; pass --out to
choose the artifact root.
"""

import argparse
import os
import sys

from densctl.cli import main as densctl_main

HERE = os.path.dirname(os.path.abspath(__file__))


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs", help="artifact root directory")
    ap.add_argument("--config",
                    default=os.path.join(HERE, "configs", "regulation_trial.cfg"))
    ns = ap.parse_args(argv)
    return densctl_main(["macro", "--config", ns.config, "--out", ns.out])


if __name__ == "__main__":
    sys.exit(run())
