"""Eleven prior atoms, one datum: smoothing weights and the Schroedinger coupling.

Prints the t=0 weights, the optimal-proposal posterior mean and, for each
atom, the mean of its column of the Schroedinger coupling.
"""
import numpy as np

from schrodinger_da import Ensemble, GaussianMapModel, ObservationModel, make_rng
from schrodinger_da.filters_discrete import optimal_proposal_step, schroedinger_step
from schrodinger_da.smoothing import smoothing_weights

z0 = np.linspace(-1, 1, 11)[:, None]
model = GaussianMapModel(lambda z: z, np.eye(1), 0.1)
obs = ObservationModel.linear(np.eye(1), 0.1 * np.eye(1), np.array([-0.5]))
prior = Ensemble(z0)

w = smoothing_weights(prior, model, obs)
big = Ensemble(np.repeat(z0, 1000, axis=0))
post = optimal_proposal_step(big, model, obs, make_rng(0, 1))
out = schroedinger_step(prior, model, obs, K=1000, rng=make_rng(0, 2))
col_means = out.info["P"].T @ out.info["forecast"][:, 0]

print("atom    weight   column mean")
for a, wi, m in zip(z0[:, 0], w, col_means):
    print(f"{a:+.1f}  {wi:7.4f}   {m:+.4f}")
print(f"posterior mean (optimal proposal, M=11000): {post.states.mean():.4f}")
