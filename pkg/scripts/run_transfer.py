"""Pre-train, then fine-tune on one or more downstream tasks.

    python3 scripts/run_transfer.py classify anomaly forecast   # P=4 backbone
    python3 scripts/run_transfer.py impute                      # P=24 backbone
"""
import argparse
import json

from timesbert.experiments import (
    pretrain_for_transfer,
    run_anomaly,
    run_classification,
    run_forecast,
    run_imputation,
)

RUNNERS = {"classify": (4, run_classification), "anomaly": (4, run_anomaly), "forecast": (4, run_forecast),
           "impute": (24, run_imputation)}

ap = argparse.ArgumentParser()
ap.add_argument("tasks", nargs="+", choices=sorted(RUNNERS))
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

backbones = {}
for task in args.tasks:
    p, fn = RUNNERS[task]
    if p not in backbones:
        pre = pretrain_for_transfer(p, seed=args.seed)
        print(f"pre-trained P={p} in {pre['seconds']:.1f}s")
        backbones[p] = pre["params"]
    out = fn(backbones[p], seed=args.seed)
    out.pop("params", None)
    print(task, json.dumps(out, indent=2, default=str))
