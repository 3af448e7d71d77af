"""
KDE points versus Langevin samples
==================================

Twenty particles follow the deterministic flow towards a standard normal
target. Compare them with twenty Euler-Maruyama Langevin chains run for the
long time: the flow settles into an evenly spread, symmetric configuration,
while each group of chains carries Monte Carlo noise.
"""

import numpy as np

from kdeflow import FlowConfig, initial_ensemble, integrate, make_gaussian_mixture_target
from kdeflow import make_kernel, make_rng
from kdeflow.dynamics import sde_baseline
from kdeflow.kde import MixtureApprox

target = make_gaussian_mixture_target([[0.0]], [1.0])
kernel = make_kernel("gaussian", 1)
h = 0.3

# start everything off-centre so the transport is visible
init = initial_ensemble(20, 1, make_rng(0), mean=[3.0], scale=0.5, h=h)
ens, trace = integrate(init, target, kernel, FlowConfig(h=h), trace=True)
print(f"flow: {trace.message} at t={trace.times[-1]:.2f} after {trace.n_steps} steps")
print("sorted KDE points:", np.round(np.sort(ens.positions[:, 0]), 3))

# the points target rho_tar and their KDE approximates it, so the points themselves
# are narrower than N(0, 1): their spread is roughly sqrt(1 - h^2)
print(f"KDE point std {ens.positions.std(ddof=1):.3f}, sqrt(1 - h^2) = {np.sqrt(1 - h * h):.3f}")

# 200 independent groups of 20 Langevin chains, run for t = 50 (long past mixing)
dt, n_steps = 1e-2, 5000
starts = np.tile(init.positions, (200, 1))
sde = sde_baseline(starts, target, dt, n_steps, make_rng(1)).positions.reshape(200, 20)
print(f"KDE points: |mean| {abs(ens.positions.mean()):.1e}")
print(f"Langevin, 20 chains: |mean| {np.abs(sde.mean(axis=1)).mean():.2f} on average, "
      f"std ranges {sde.std(axis=1, ddof=1).min():.2f} to {sde.std(axis=1, ddof=1).max():.2f}")
sde = sde[0]

# the KDE of the flow's output is a smooth density estimate of the target
mix = MixtureApprox(ens.positions, kernel, h)
x = np.linspace(-4, 4, 9)[:, None]
print("x        KDE      target")
for xi, a, b in zip(x[:, 0], np.exp(mix.log_density(x)), np.exp(target.log_density(x))):
    print(f"{xi:5.1f}  {a:.4f}   {b:.4f}")

try:
    from matplotlib import pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    grid = np.linspace(-4, 4, 400)[:, None]
    plt.plot(grid, np.exp(target.log_density(grid)), label="target")
    plt.plot(grid, np.exp(mix.log_density(grid)), ls="--", label="KDE of KDE points")
    plt.plot(ens.positions, np.zeros(20), "o", label="KDE points")
    plt.plot(sde, np.full(20, -0.02), "x", label="Langevin")
    plt.legend()
    plt.savefig("kde_points_vs_langevin.png", dpi=120)
