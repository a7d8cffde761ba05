"""Double-well twin: filtering histogram at t = 2 and smoothed t = 0 mean."""
import numpy as np

from schrodinger_da import cli

cfg = cli.load_config("double_well")
res = cli.run_twin_experiment(cfg, keep_final=True)
step, edges, mass = res.histograms[-1]
width = 40 / mass.max()
for lo, m in zip(edges[:-1], mass):
    print(f"{lo:+5.2f} {'#' * int(round(m * width))}")
z, w = res.final.states[:, 0], res.final.weights
print(f"mass in right well: {w[z > 0].sum() / w.sum():.3f}")

states, weights, _ = cli.smoothing_at_zero(cfg)
print(f"prior t=0 mean {states.mean():+.3f}, smoothed {weights @ states[:, 0] / weights.sum():+.3f}")
