"""Autoencoder + latent ODE baseline, with optional end-to-end fine-tuning.

Stages:

1. an autoencoder compresses each output snapshot ``Y_i(tau)`` (all grid
   points at one time) into ``d_s`` codes;
2. a dynamics network is fitted so that its forward-Euler trajectory driven
   by the input tracks the codes;
3. optionally, dynamics and decoder are trained jointly against the
   snapshots, and the encoder is dropped.

The latent trajectory starts from the code of the resting field (the full
state is zero at ``t = 0``), and uses the same Euler machinery and time-step
normalization as the LDNet.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..errors import InvalidDatasetError, ShapeError, UnsupportedDatasetError
from ..fcnn import DenseNetwork, NormalizationSpec, backward_flat, forward_flat, init_glorot
from ..losses import regularization
from ..model import InputSignal, _locate, _rollout, _rollout_vjp, n_steps
from ..training import TrainingSchedule, run_two_stage

__all__ = [
    "ae_layer_sizes",
    "AEModel",
    "LatentODE",
    "SnapshotData",
    "snapshot_data",
    "train_autoencoder",
    "encode",
    "fit_latent_dynamics",
    "train_latent_ode",
    "finetune_e2e",
    "AEODEModel",
    "ae_ode_predict",
]


def ae_layer_sizes(n_nodes: int, d_s: int, n_hidden: int, width: int):
    """Encoder and decoder sizes.

    The encoder's first hidden layer has ``width`` neurons and the following
    ones shrink linearly towards ``d_s``; the decoder mirrors it.
    """
    if n_hidden < 0 or width < 1 or d_s < 1:
        raise ShapeError("invalid autoencoder shape")
    hidden = [int(round(v)) for v in np.linspace(width, d_s, n_hidden + 1)[:-1]]
    enc = [n_nodes, *hidden, d_s]
    return enc, enc[::-1]


@dataclass(frozen=True, eq=False)
class AEModel:
    encoder: DenseNetwork
    decoder: DenseNetwork
    y_norm: NormalizationSpec  # per-node affine map shared by input and output

    def __post_init__(self):
        if self.encoder.n_out != self.decoder.n_in:
            raise ShapeError("encoder output and decoder input dims differ")
        if self.encoder.n_in != self.decoder.n_out:
            raise ShapeError("encoder input and decoder output dims differ")

    @property
    def d_s(self) -> int:
        return self.encoder.n_out

    def encode(self, Y):
        return self.encoder(self.y_norm.normalize(np.atleast_2d(Y)))

    def decode(self, S):
        return self.y_norm.denormalize(self.decoder(np.atleast_2d(S)))


@dataclass(frozen=True, eq=False)
class LatentODE:
    """Dynamics network on the Euler grid (same layout as the LDNet's)."""

    dyn_net: DenseNetwork
    dt: float
    dt_ref: float
    u_norm: NormalizationSpec
    s0: np.ndarray
    u_eq: Optional[np.ndarray] = None

    @property
    def n_latent(self) -> int:
        return self.dyn_net.n_out

    def trajectory(self, signals, t_end, theta=None):
        K = n_steps(t_end, self.dt)
        U = _grid_inputs(self, signals, K)
        s0 = np.broadcast_to(self.s0, (len(signals), self.n_latent))
        states, _ = _rollout(self, self.dyn_net.params if theta is None else theta, U, cache=False, s0=s0)
        return states


@dataclass
class SnapshotData:
    """Fixed-grid view of a dataset: ``Y`` is ``(n, n_t, N)``, times shared."""

    signals: list
    times: np.ndarray
    Y: np.ndarray
    y_norm: float
    t_final: float


def snapshot_data(dataset) -> SnapshotData:
    samples = list(dataset.samples)
    if not samples:
        raise InvalidDatasetError("dataset is empty")
    if not dataset.on_fixed_grid():
        raise UnsupportedDatasetError("autoencoder baselines need one shared spatial grid")
    t0 = np.asarray(samples[0].times)
    if any(not np.array_equal(s.times, t0) for s in samples):
        raise UnsupportedDatasetError("autoencoder baselines need shared observation times")
    if dataset.d_y != 1:
        raise UnsupportedDatasetError("autoencoder baselines support scalar outputs only")
    Y = np.stack([s.outputs[..., 0] for s in samples])
    return SnapshotData([s.input for s in samples], t0, Y, dataset.y_norm, dataset.t_final)


def _grid_inputs(model, signals, K):
    grid = np.arange(K) * model.dt
    U = np.empty((K, len(signals), model.u_norm.size))
    for i, s in enumerate(signals):
        U[:, i, :] = model.u_norm.normalize(s.resample(grid))
    return U


# -- stage 1: autoencoder --------------------------------------------------------


def _ae_objective(enc_sizes, dec_sizes, Yn, Ytarget_scale, alpha_enc, alpha_dec, half_width):
    """Loss ``mean_rows |dec(enc(Yn)) - Y|^2 / (N y_norm^2)`` in normalized units."""
    n_enc = sum((a + 1) * b for a, b in zip(enc_sizes[:-1], enc_sizes[1:]))
    M, N = Yn.shape
    # physical error = half_width * (out - Yn)
    w2 = (half_width**2) / (N * Ytarget_scale**2)

    def fun(theta):
        te, td = theta[:n_enc], theta[n_enc:]
        S, ce = forward_flat(enc_sizes, te, Yn)
        out, cd = forward_flat(dec_sizes, td, S)
        D = out - Yn
        loss = float(np.sum(w2 * D * D) / M)
        re, dre = regularization(te)
        rd, drd = regularization(td)
        loss += alpha_enc * re + alpha_dec * rd
        G = (2.0 / M) * w2 * D
        dS, gd = backward_flat(dec_sizes, td, cd, G)
        _, ge = backward_flat(enc_sizes, te, ce, dS, need_input_grad=False)
        return loss, np.concatenate([ge + alpha_enc * dre, gd + alpha_dec * drd])

    return fun, n_enc


def train_autoencoder(
    dataset,
    d_s: int,
    *,
    n_hidden: int = 1,
    width: int = 75,
    alpha_enc: float = 0.0,
    alpha_dec: float = 0.0,
    schedule: TrainingSchedule = TrainingSchedule(),
    y_norm_spec: Optional[NormalizationSpec] = None,
    progress=None,
):
    """Fit encoder and decoder on all snapshots; returns ``(AEModel, history)``."""
    data = snapshot_data(dataset)
    n, n_t, N = data.Y.shape
    if y_norm_spec is None:
        lo, hi = data.Y.min(), data.Y.max()
        y_norm_spec = NormalizationSpec(np.full(N, (lo + hi) / 2), np.full(N, max(hi - lo, 1e-300) / 2))
    enc_sizes, dec_sizes = ae_layer_sizes(N, d_s, n_hidden, width)
    enc0 = init_glorot(enc_sizes, schedule.seed, 2)
    dec0 = init_glorot(dec_sizes, schedule.seed, 3)
    Yn = y_norm_spec.normalize(data.Y.reshape(-1, N))
    fun, n_enc = _ae_objective(enc_sizes, dec_sizes, Yn, data.y_norm, alpha_enc, alpha_dec, y_norm_spec.half_width)
    theta, history = run_two_stage(fun, np.concatenate([enc0.params, dec0.params]), schedule, progress)
    model = AEModel(enc0.with_params(theta[:n_enc]), dec0.with_params(theta[n_enc:]), y_norm_spec)
    return model, history


def encode(ae: AEModel, dataset):
    """Latent codes ``(n, n_t, d_s)`` of every snapshot."""
    data = snapshot_data(dataset)
    n, n_t, N = data.Y.shape
    return ae.encode(data.Y.reshape(-1, N)).reshape(n, n_t, ae.d_s)


# -- stage 2: latent dynamics ---------------------------------------------------


def _obs_locator(model, times, n_samples):
    K = n_steps(float(np.max(times)), model.dt)
    k, th = _locate(times, model.dt, K)
    return K, k, th


def _latent_objective(model: LatentODE, signals, times, codes, alpha_dyn):
    n = len(signals)
    K, k, th = _obs_locator(model, times, n)
    U = _grid_inputs(model, signals, K)
    s0 = np.broadcast_to(model.s0, (n, model.n_latent))
    n_t = times.size
    C = np.transpose(codes, (1, 0, 2))  # (n_t, n, d_s)
    wt = th[:, None, None]

    def fun(theta):
        states, caches = _rollout(model, theta, U, s0=s0)
        S = (1 - wt) * states[k] + wt * states[k + 1]
        D = S - C
        loss = float(np.sum(D * D) / (n * n_t))
        r, dr = regularization(theta)
        loss += alpha_dyn * r
        dS = (2.0 / (n * n_t)) * D
        G = np.zeros_like(states)
        np.add.at(G, k, (1 - wt) * dS)
        np.add.at(G, k + 1, wt * dS)
        g, _ = _rollout_vjp(model, theta, caches, G)
        return loss, g + alpha_dyn * dr

    return fun


def fit_latent_dynamics(
    codes,
    signals: Sequence[InputSignal],
    times,
    *,
    hidden: Sequence[int],
    dt: float,
    dt_ref: float,
    u_norm: NormalizationSpec,
    s0=None,
    alpha_dyn: float = 0.0,
    schedule: TrainingSchedule = TrainingSchedule(),
    progress=None,
):
    """Fit ``ds/dt = dt_ref^-1 N(s, u)`` so Euler trajectories match ``codes``.

    ``codes`` is ``(n, n_t, d_s)`` sampled at the shared ``times``.  Returns
    ``(LatentODE, history)``.
    """
    codes = np.asarray(codes, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if codes.ndim != 3 or codes.shape[0] != len(signals) or codes.shape[1] != times.size:
        raise ShapeError(f"codes {codes.shape} do not match {len(signals)} signals x {times.size} times")
    d_s = codes.shape[2]
    s0 = np.zeros(d_s) if s0 is None else np.asarray(s0, dtype=np.float64)
    net = init_glorot([d_s + u_norm.size, *hidden, d_s], schedule.seed, 4)
    model = LatentODE(net, dt, dt_ref, u_norm, s0)
    fun = _latent_objective(model, list(signals), times, codes, alpha_dyn)
    theta, history = run_two_stage(fun, net.params, schedule, progress)
    return replace(model, dyn_net=net.with_params(theta)), history


def train_latent_ode(ae: AEModel, dataset, *, hidden, dt, dt_ref, u_norm, alpha_dyn=0.0, schedule=TrainingSchedule(), progress=None):
    """Encode the dataset and fit latent dynamics to the codes."""
    data = snapshot_data(dataset)
    codes = encode(ae, dataset)
    s0 = ae.encode(np.zeros((1, data.Y.shape[2])))[0]
    return fit_latent_dynamics(
        codes, data.signals, data.times, hidden=hidden, dt=dt, dt_ref=dt_ref, u_norm=u_norm,
        s0=s0, alpha_dyn=alpha_dyn, schedule=schedule, progress=progress,
    )


# -- stage 3: end-to-end -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AEODEModel:
    """Retained parts of the pipeline: dynamics and decoder."""

    dynamics: LatentODE
    decoder: DenseNetwork
    y_norm: NormalizationSpec

    @property
    def params(self):
        return np.concatenate([self.dynamics.dyn_net.params, self.decoder.params])


def ae_ode_predict(model: AEODEModel, signals, times, theta=None):
    """Predicted snapshots ``(n, n_t, N)``."""
    times = np.asarray(times, dtype=np.float64)
    n_dyn = model.dynamics.dyn_net.n_params
    theta = model.params if theta is None else theta
    K, k, th = _obs_locator(model.dynamics, times, len(signals))
    U = _grid_inputs(model.dynamics, signals, K)
    s0 = np.broadcast_to(model.dynamics.s0, (len(signals), model.dynamics.n_latent))
    states, _ = _rollout(model.dynamics, theta[:n_dyn], U, cache=False, s0=s0)
    wt = th[:, None, None]
    S = (1 - wt) * states[k] + wt * states[k + 1]  # (n_t, n, d_s)
    out, _ = forward_flat(model.decoder.layer_sizes, theta[n_dyn:], S.reshape(-1, S.shape[-1]))
    Y = model.y_norm.denormalize(out).reshape(times.size, len(signals), -1)
    return np.transpose(Y, (1, 0, 2))


def finetune_e2e(
    model: AEODEModel,
    dataset,
    *,
    alpha_dyn: float = 0.0,
    alpha_dec: float = 0.0,
    schedule: TrainingSchedule = TrainingSchedule(),
    progress=None,
):
    """Train dynamics and decoder jointly on the snapshot misfit."""
    data = snapshot_data(dataset)
    n, n_t, N = data.Y.shape
    dyn = model.dynamics
    n_dyn = dyn.dyn_net.n_params
    dec_sizes = model.decoder.layer_sizes
    K, k, th = _obs_locator(dyn, data.times, n)
    U = _grid_inputs(dyn, data.signals, K)
    s0 = np.broadcast_to(dyn.s0, (n, dyn.n_latent))
    wt = th[:, None, None]
    Yn = model.y_norm.normalize(np.transpose(data.Y, (1, 0, 2)).reshape(-1, N))
    w2 = model.y_norm.half_width**2 / (N * data.y_norm**2)
    M = n * n_t

    def fun(theta):
        td, tr = theta[:n_dyn], theta[n_dyn:]
        states, caches = _rollout(dyn, td, U, s0=s0)
        S = ((1 - wt) * states[k] + wt * states[k + 1]).reshape(-1, dyn.n_latent)
        out, cd = forward_flat(dec_sizes, tr, S)
        D = out - Yn
        loss = float(np.sum(w2 * D * D) / M)
        r1, dr1 = regularization(td)
        r2, dr2 = regularization(tr)
        loss += alpha_dyn * r1 + alpha_dec * r2
        dS, gr = backward_flat(dec_sizes, tr, cd, (2.0 / M) * w2 * D)
        dS = dS.reshape(n_t, n, -1)
        G = np.zeros_like(states)
        np.add.at(G, k, (1 - wt) * dS)
        np.add.at(G, k + 1, wt * dS)
        gd, _ = _rollout_vjp(dyn, td, caches, G)
        return loss, np.concatenate([gd + alpha_dyn * dr1, gr + alpha_dec * dr2])

    if schedule.adam_epochs == 0 and schedule.bfgs_epochs == 0:
        return model, []
    theta, history = run_two_stage(fun, model.params, schedule, progress)
    new = AEODEModel(
        replace(dyn, dyn_net=dyn.dyn_net.with_params(theta[:n_dyn])),
        model.decoder.with_params(theta[n_dyn:]),
        model.y_norm,
    )
    return new, history
