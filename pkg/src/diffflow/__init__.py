"""DiffFlow: a unified SDE for score-based diffusion models and GANs, as a particle engine."""

__version__ = "0.1.0"

from .kernels import BACKEND
from .schedules import Schedule, ScheduleError, decompose, preset, validate
from .targets import GaussianMixture, SmoothedScaledTarget, growth_bound_constants, quantile_radius
from .gaussian_oracle import GaussianState, kl_gaussian, propagate, relative_fisher, verify_prop1
from .dynamics import (Kde, NoneCancelled, OracleGaussian, DiscriminatorBased, ParticleCloud, drift,
                       gaussian_init, sdm_reduced_drift, simulate, step)
from .estimators import Mlp, TrainConfig, kde_score, mlp_eval_grad, train_dsm, train_logistic
from .metrics import energy_distance, gaussian_fit_kl, mmd_rbf, moments
from .elbo import DriftAssembly, ElboEstimate, elbo, exact_log_likelihood_gaussian
from .gan_algos import (AnnealingPlan, difflow_gan_train, generator_equivalence_check, improved_sample,
                        improved_train)

__all__ = [
    "BACKEND", "Schedule", "ScheduleError", "decompose", "preset", "validate",
    "GaussianMixture", "SmoothedScaledTarget", "growth_bound_constants", "quantile_radius",
    "GaussianState", "kl_gaussian", "propagate", "relative_fisher", "verify_prop1",
    "Kde", "NoneCancelled", "OracleGaussian", "DiscriminatorBased", "ParticleCloud", "drift",
    "gaussian_init", "sdm_reduced_drift", "simulate", "step",
    "Mlp", "TrainConfig", "kde_score", "mlp_eval_grad", "train_dsm", "train_logistic",
    "energy_distance", "gaussian_fit_kl", "mmd_rbf", "moments",
    "DriftAssembly", "ElboEstimate", "elbo", "exact_log_likelihood_gaussian",
    "AnnealingPlan", "difflow_gan_train", "generator_equivalence_check", "improved_sample", "improved_train",
]
