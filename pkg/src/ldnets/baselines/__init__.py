"""Comparison models: POD-DEIM and autoencoder + latent ODE."""

from .autoencoder import (
    AEModel,
    AEODEModel,
    LatentODE,
    ae_ode_predict,
    finetune_e2e,
    fit_latent_dynamics,
    train_autoencoder,
    train_latent_ode,
)
from .pod_deim import (
    DEIMOperator,
    PODBasis,
    build_pod_deim,
    compute_pod,
    deim_indices,
    pod_deim_simulate,
)
