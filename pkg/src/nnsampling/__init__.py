"""Posterior sampling of small neural networks.

Samplers for the Gibbs distribution exp(-beta * L(theta)) of a network
loss (SGLD, A/B/O Langevin splittings including BAOAB and the geometric
Langevin algorithms, HMC, and the multi-walker ensemble quasi-Newton
scheme) together with the diagnostics used to study them: convergence of
kinetic-energy and virial averages, integrated autocorrelation times, and
covariance-direction loss-landscape grids.
"""

__version__ = "0.1.0"

from .model import (Architecture, LossGrad, QuadraticLossGradient, flatten,
                    forward, loss_and_gradient, random_params,
                    softmax_cross_entropy, total_loss, unflatten)
from .data import (Dataset, IdxFormatError, MinibatchStream, filter_two_classes,
                   full_gradient, load_mnist_idx, make_gaussian_model,
                   make_harmonic, make_two_clusters, minibatch_gradient,
                   split_train_validation_test, write_idx_images, write_idx_labels)
from .samplers import (DivergenceError, SamplerConfig, WalkerState,
                       ensure_gradient, make_walker, step_bbgd, step_gd,
                       step_hmc, step_sgd, step_sgld, step_splitting)
from .ensemble import (EnsembleState, make_ensemble, preconditioner_spectra,
                       rebuild_preconditioners, run_eqn, step_eqn)
from .analysis import (AnalysisError, IatResult, LandscapeGrid, SpectrumResult,
                       Trajectory, covariance_spectrum,
                       integrated_autocorrelation_time, kinetic_energy,
                       landscape_grid, project_trajectory, running_average,
                       trajectory_covariance, trajectory_from_csv, virial)
from .cli import ConfigError, fit_slope, run_config, run_recipe
