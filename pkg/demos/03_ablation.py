"""Four loss compositions on one split: pred only, +EO, +CEC, and all three.

Defaults match the desk-scale acceptance settings for a single seed (n=10000,
30 epochs), which takes about 6-7 minutes on one core.  Use --n 2000 for a
quick look.  The last column is the strict Pareto flag over F1, EO gap
and CEC.
"""

import argparse
import logging

from cecfair.data import SyntheticConfig
from cecfair.experiments import ablation, pareto_rows, prepare_synthetic
from cecfair.trainer import TrainConfig

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=10_000)
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--lambda-cec", type=float, default=1.0)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

prep = prepare_synthetic(SyntheticConfig(n=args.n, seed=args.seed))
runs = ablation(prep, TrainConfig(epochs=args.epochs, seed=args.seed, lambda_cec=args.lambda_cec))

print(f"\n{'variant':10s} {'F1':>6s} {'EO':>6s} {'CEC':>6s} {'PFR':>6s} {'B %':>6s}  nondominated")
flags = {r["model"]: r["nondominated"] for r in pareto_rows(runs)}
for name, res in runs.items():
    row = res.row()
    print(f"{name:10s} {row['f1']:6.3f} {row['eo_gap']:6.3f} {row['cec']:6.3f} {row['pfr']:6.3f} "
          f"{row['regime_B']:6.1f}  {flags[name]}")
