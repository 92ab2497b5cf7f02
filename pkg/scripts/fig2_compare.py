"""Closed-loop comparison of polyflow, EDMD-polyflow, monomial and RBF lifts.

Runs the four-method benchmark from configs/pest.json and writes compare.csv,
compare.json and one trajectory CSV per method.

    python3 scripts/fig2_compare.py [--out DIR] [--jobs N]
"""
import argparse
import sys
from pathlib import Path

from polyflow_mpc.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=str(ROOT / "out" / "fig2"))
    p.add_argument("--jobs", type=int, default=1)
    a = p.parse_args()
    sys.exit(main(["compare", "--config", str(ROOT / "configs" / "pest.json"), "--out", a.out, "--jobs", str(a.jobs)]))
