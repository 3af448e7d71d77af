"""KDE points: deterministic particle approximations of a target density.

Particles follow ``dX_j/dt = grad log(rho_tar / KDE[X])(X_j)`` until they stop
moving; the resulting kernel mixture is a sampler, an importance proposal and,
read the other way round, a deconvolution of the target.
"""

__version__ = "0.1.0"

from .applications import (EmbeddedDistribution, LinearGaussianModel, SmcModel, embed,
                           kalman_filter, make_rotation_model, outbed, smc_run, smc_step,
                           systematic_indices)
from .core import (BandwidthSpec, CallableTarget, GaussianKernel, GaussianMixtureTarget, Kernel,
                   LogisticKernel, ParticleEnsemble, RezendeTarget, TargetDensity, WeightedSample,
                   initial_ensemble, make_gaussian_mixture_target, make_kernel, make_rezende_target,
                   make_rng, make_three_gaussian_target, target_from_dict)
from .dynamics import (FlowConfig, FlowError, FlowTrace, TemperLadder, anneal, auto_anneal,
                       integrate, kde_points, ratio_fluctuation, sde_baseline, velocity_field)
from .evaluation import (Grid, RkhsFunction, bisect_bandwidth, fit_rate, herding_points,
                         kl_flow_derivative, kl_numeric, make_benchmark_mixture, mean_embedding,
                         mmd, quadrature_error_suite, sbq_points, sbq_weights)
from .kde import MixtureApprox, kde_log_density, kde_score, smoothing_limit_check
from .sampling import (Estimate, QmcSpec, direct_sample, halton_points, importance_estimate,
                       kde_qmc_points, mcmc_baseline, self_normalized_estimate,
                       stratified_sample)

__all__ = [
    "BandwidthSpec",
    "CallableTarget",
    "EmbeddedDistribution",
    "Estimate",
    "FlowConfig",
    "FlowError",
    "FlowTrace",
    "GaussianKernel",
    "GaussianMixtureTarget",
    "Grid",
    "Kernel",
    "LinearGaussianModel",
    "LogisticKernel",
    "MixtureApprox",
    "ParticleEnsemble",
    "QmcSpec",
    "RezendeTarget",
    "RkhsFunction",
    "SmcModel",
    "TargetDensity",
    "TemperLadder",
    "WeightedSample",
    "anneal",
    "auto_anneal",
    "bisect_bandwidth",
    "direct_sample",
    "embed",
    "fit_rate",
    "halton_points",
    "herding_points",
    "importance_estimate",
    "initial_ensemble",
    "integrate",
    "kalman_filter",
    "kde_log_density",
    "kde_points",
    "kde_qmc_points",
    "kde_score",
    "kl_flow_derivative",
    "kl_numeric",
    "make_benchmark_mixture",
    "make_gaussian_mixture_target",
    "make_kernel",
    "make_rezende_target",
    "make_rng",
    "make_rotation_model",
    "make_three_gaussian_target",
    "mcmc_baseline",
    "mean_embedding",
    "mmd",
    "outbed",
    "quadrature_error_suite",
    "ratio_fluctuation",
    "sbq_points",
    "sbq_weights",
    "sde_baseline",
    "self_normalized_estimate",
    "smc_run",
    "systematic_indices",
    "smc_step",
    "smoothing_limit_check",
    "stratified_sample",
    "target_from_dict",
    "velocity_field",
]
