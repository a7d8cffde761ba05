"""HMC over discretised Brownian paths conditioned on a noisy endpoint.

Compares sampled means at a few times with the Gaussian bridge values.
"""
import numpy as np

from schrodinger_da import ObservationModel, SdeModel
from schrodinger_da.smoothing import HmcConfig, PathPosterior, hmc_sample_paths

N, R, y = 20, 0.5, 1.0
model = SdeModel(lambda t, z: np.zeros_like(z), 1.0, 1.0 / N)
obs = ObservationModel.linear(np.eye(1), R * np.eye(1), np.array([y]))
post = PathPosterior(model, np.zeros(1), obs)
res = hmc_sample_paths(post, HmcConfig(0.1, n_leapfrog=10, n_iter=5000), np.random.default_rng(0), anchor=0)
z = res.samples[500:, :, 0]
t = np.linspace(0, 1, N + 1)
print(f"acceptance rate {res.acceptance_rate:.2f}")
for n in (5, 10, 15, 20):
    print(f"t={t[n]:.2f}  sampled mean {z[:, n].mean():+.3f}  exact {t[n] * y / (1 + R):+.3f}")
