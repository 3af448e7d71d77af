"""
Outbedding and SMC resampling
=============================

A weighted sample has a kernel mean embedding, which for a Gaussian kernel
is just its weighted KDE. Flowing equal-weight particles against that KDE
gives points whose own KDE reproduces it. We use that as the resampling step
of a particle filter on a linear-Gaussian toy and check it against the
Kalman filter.
"""

import numpy as np

from kdeflow import (FlowConfig, WeightedSample, embed, kalman_filter, make_kernel,
                     make_rng, make_rotation_model, outbed, smc_run)
from kdeflow.evaluation import mmd

# deconvolution: atoms from N(0, 1), embedded with h = 0.3, then outbedded
rng = make_rng(0)
atoms = WeightedSample(rng.standard_normal((2000, 1)))
emb = embed(atoms, make_kernel("gaussian", 1), h=0.3)
pts = outbed(emb, 100, FlowConfig(h=0.3), rng=rng).positions
print(f"outbedded variance {pts.var(ddof=1):.3f}, atom variance {atoms.points.var(ddof=1):.3f}, "
      f"embedding variance {atoms.points.var(ddof=1) + 0.09:.3f}")

# the filter
model = make_rotation_model()
xs, ys = model.simulate(10, make_rng(1))
means, covs = kalman_filter(model, ys)
run = smc_run(model, model.sample_prior, ys, J=40, rng=make_rng(2), config=FlowConfig(h=0.3))
sd = np.sqrt(np.diagonal(covs, axis1=1, axis2=2))
print("step  ESS    MMD     |mean - kalman| / sd")
for t in range(len(ys)):
    z = np.abs(run.means[t] - means[t]) / sd[t]
    print(f"{t + 1:>4}  {run.ess[t]:5.1f}  {run.mmd[t]:.4f}  {np.round(z, 2)}")

# compare with the classical multinomial resampler, same observations
multi = smc_run(model, model.sample_prior, ys, J=40, resampler="multinomial", rng=make_rng(2))
print("multinomial step MMD:", np.round(
    [mmd(r, p, 0.3) for r, p in zip(multi.resampled, multi.posteriors)], 4))
