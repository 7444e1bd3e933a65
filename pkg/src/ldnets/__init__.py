"""Latent dynamics networks: learn low-dimensional latent dynamics of
space-time fields driven by input signals, with the synthetic full-order
models, metrics and projection/autoencoder baselines used to assess them.
"""

from .errors import *  # noqa: F401,F403
from .fcnn import DenseNetwork, NormalizationSpec, init_glorot, make_normalization
from .losses import LossSpec, discrepancy_goal_oriented, discrepancy_quadratic
from .metrics import EvaluationReport, evaluate, nrmse, pearson_dissimilarity
from .model import (
    Dirichlet,
    InputSignal,
    LatentTrajectory,
    LDNet,
    bptt_gradient,
    integrate_latent,
    interpolate_latent,
    latent_rhs,
    predict,
    reconstruct,
    sample_input_at,
)
from .training import TrainingSchedule, adam_step, bfgs_run, total_loss, train_two_stage

__version__ = "0.1.0"
