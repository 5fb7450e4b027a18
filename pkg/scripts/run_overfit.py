"""Pre-train the small encoder on the two-dataset corpus and report MPM/FTP fit."""
import argparse
import json

from timesbert.experiments import run_overfit

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=7)
ap.add_argument("--steps", type=int, default=500)
ap.add_argument("--log")
args = ap.parse_args()

out = run_overfit(seed=args.seed, steps=args.steps, log_path=args.log)
print(json.dumps({k: v for k, v in out.items() if k not in ("params", "log")}, indent=2))
