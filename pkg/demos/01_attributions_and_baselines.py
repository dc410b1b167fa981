"""Why one shared baseline matters when comparing two attributions.

For a linear scorer, integrated gradients are exact: IG_j = (x_j - b_j) w_j.
Comparing a factual x with its counterfactual x' against the same baseline b
cancels b completely, so whatever differs is down to x and x'.  Give each
individual their own group's baseline and an artificial (b1 - b0) * w term
appears instead.

Run:  python3 demos/01_attributions_and_baselines.py
"""

import numpy as np

from cecfair.attribution import cec_score, ig_batch, integrated_gradients, pair_attributions
from cecfair.model import MLPModel, forward

np.set_printoptions(precision=4, suppress=True)

w = np.array([0.8, 0.5, 0.0])           # income, savings, an ignored column
lin = MLPModel([3, 1], [w[:, None]], [np.zeros(1)], dropout=0.0)

x = np.array([60.0, 10.0, 0.0])
x_cf = np.array([62.0, 9.0, 1.0])
b0 = np.array([50.0, 8.0, 0.0])          # factual's label-group mean
b1 = np.array([45.0, 7.0, 1.0])          # the other group's mean

print("linear model, shared baseline")
shared = ig_batch(lin, np.stack([x, x_cf]), np.stack([b0, b0]), 32)
print("  IG(x)   ", shared[0])
print("  IG(x')  ", shared[1])
print("  diff    ", shared[0] - shared[1], " expected", (x - x_cf) * w)

print("\nlinear model, group-specific baselines")
mixed = ig_batch(lin, np.stack([x, x_cf]), np.stack([b0, b1]), 32)
print("  diff    ", mixed[0] - mixed[1])
print("  spurious", (mixed[0] - mixed[1]) - (x - x_cf) * w, " = (b1 - b0) * w =", (b1 - b0) * w)

# A nonlinear net: the CEC score is half the distance between unit directions.
net = MLPModel.init(3, (16, 8), seed=4)
ax, acf = pair_attributions(net, x / 50, x_cf / 50, b0 / 50, steps=128)
s = cec_score(ax, acf)
print("\nsmall tanh net")
print("  direction x  ", ax.normalized)
print("  direction x' ", acf.normalized)
print(f"  CEC = {s.score:.4f}   (0 identical reasoning, 1 opposed)")

# completeness: attributions add up to the change in the output
att = integrated_gradients(net, x / 50, b0 / 50, steps=256)
gap = forward(net, x / 50) - forward(net, b0 / 50)
print(f"  sum IG {att.raw.sum():.6f}  vs  f(x) - f(b) {gap:.6f}")
