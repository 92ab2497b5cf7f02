"""Feasible domains of the polyflow and Jacobian MPC on the pest model.

Fits both models from configs/pest.json, scans a grid over X and writes
domain_*.csv plus domain_overlay.svg into the output directory.

    python3 scripts/fig1_domain.py [--out DIR] [--jobs N]
"""
import argparse
import json
import sys
from pathlib import Path

from polyflow_mpc.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(out: Path, jobs: int) -> int:
    out.mkdir(parents=True, exist_ok=True)
    base = json.loads((ROOT / "configs" / "pest.json").read_text())
    models = []
    for basis in ("polyflow", "jacobian"):
        cfg = out / f"config_{basis}.json"
        cfg.write_text(json.dumps({**base, "basis": basis, "out": str(out)}, indent=1))
        code = main(["fit", "--config", str(cfg)])
        if code:
            return code
        models += ["--model", str(out / f"model_{basis}.json")]
    return main(["domain", "--config", str(out / "config_polyflow.json"), *models, "--jobs", str(jobs)])


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=str(ROOT / "out" / "fig1"))
    p.add_argument("--jobs", type=int, default=1)
    a = p.parse_args()
    sys.exit(run(Path(a.out), a.jobs))
