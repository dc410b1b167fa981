"""One unconstrained model on a small synthetic set, from matching to audit.

Prints match quality and outcome metrics, then the A-D regime split:
  A  same prediction, similar reasoning
  B  same prediction, different reasoning   (hidden procedural bias)
  C  different prediction, similar reasoning
  D  both differ
"""

import argparse
import logging

import numpy as np

from cecfair.data import SyntheticConfig
from cecfair.experiments import prepare_synthetic, run
from cecfair.trainer import TrainConfig

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=2000)
ap.add_argument("--epochs", type=int, default=10)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

prep = prepare_synthetic(SyntheticConfig(n=args.n, seed=args.seed))
cm = prep.cmap_test
print(f"test rows {prep.test.n}, matched {cm.coverage:.0%}, "
      f"median match distance {np.median(cm.distances[cm.matched]):.2f} (standardised units)")

res = run(prep, TrainConfig(variant="pred_only", epochs=args.epochs, seed=args.seed))
r = res.report
print(f"\nF1 {r.f1:.3f}   AUC {r.outcome.auc:.3f}   EO gap {r.eo_gap:.3f}   SP gap {r.outcome.sp_gap:.3f}")
print(f"population CEC {r.cec:.3f}   flip rate {r.pfr:.3f}   degenerate pairs {r.n_degenerate}")
for theta, dist in sorted(r.regime_sensitivity.items(), key=lambda kv: float(kv[0])):
    print(f"  theta {float(theta):.1f}: " + "  ".join(f"{k} {v:5.1f}%" for k, v in dist.items()))
