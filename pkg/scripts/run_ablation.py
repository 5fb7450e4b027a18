"""Joint vs MPM-only pre-training, compared on the classification transfer."""
import argparse
import json

from timesbert.experiments import run_ablation

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
args = ap.parse_args()
print(json.dumps(run_ablation(tuple(args.seeds)), indent=2))
