"""Latent Dynamics Networks.

An LDNet couples two dense networks.  The dynamics network drives a latent
state ``s(t)`` (``s(0) = 0``) through

    ds/dt = dt_ref**-1 * N_dyn(s, normalize(u))            (optionally minus
                                                           the same at (0, u_eq))

integrated with forward Euler on the grid ``k * dt``.  The reconstruction
network maps ``(s(t), [normalize(u(t))], normalize(x))`` to the output field at
a single query point ``x``:

    y(x, t) = y_0 + y_w * N_rec(...)

or, with a Dirichlet constraint, ``y_lift(x) + psi(x) * y_w * N_rec(...)``.

Inputs are resampled at the left end of each Euler step by piecewise-linear
interpolation; latent states at observation times off the grid are linearly
interpolated between grid states.

The batched engine (:func:`prepare_batch`, :func:`bptt_gradient`) works on a
flattened list of observation rows, each carrying its nested-average weight
``1 / (n_samples * n_times_i * n_points_i)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DivergenceError, DomainError, InvalidDatasetError, ShapeError
from .fcnn import (
    DenseNetwork,
    NormalizationSpec,
    backward_flat,
    forward_flat,
    init_glorot,
)
from .losses import LossSpec, regularization, row_discrepancy

__all__ = [
    "InputSignal",
    "LatentTrajectory",
    "Dirichlet",
    "LDNet",
    "sample_input_at",
    "latent_rhs",
    "integrate_latent",
    "interpolate_latent",
    "reconstruct",
    "predict",
    "prepare_batch",
    "bptt_gradient",
    "n_steps",
]

_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class InputSignal:
    """Piecewise-linear input ``u: [0, t_final] -> R^d_u``."""

    times: np.ndarray
    values: np.ndarray
    t_final: Optional[float] = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=np.float64)).copy()
        v = np.asarray(self.values, dtype=np.float64).copy()
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or t.size == 0:
            raise ShapeError("times must be a non-empty 1-D array")
        if v.shape[0] != t.size:
            raise ShapeError(f"{t.size} times but {v.shape[0]} value rows")
        if np.any(np.diff(t) <= 0):
            raise ShapeError("times must be strictly increasing")
        tf = float(t[-1]) if self.t_final is None else float(self.t_final)
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "t_final", tf)

    @classmethod
    def constant(cls, value, t_final: float) -> "InputSignal":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.array([0.0]), value[None, :], t_final=t_final)

    @property
    def d_u(self) -> int:
        return self.values.shape[1]

    def resample(self, t):
        """Interpolate at every time in ``t`` (clamped, no domain check)."""
        t = np.asarray(t, dtype=np.float64)
        if self.times.size == 1:
            return np.broadcast_to(self.values[0], t.shape + (self.d_u,)).copy()
        out = np.empty(t.shape + (self.d_u,))
        for c in range(self.d_u):
            out[..., c] = np.interp(t, self.times, self.values[:, c])
        return out

    def truncated(self, t_end: float) -> "InputSignal":
        keep = self.times <= t_end
        return InputSignal(self.times[keep], self.values[keep], t_final=t_end)


def sample_input_at(signal: InputSignal, t: float):
    if t < 0 or t > signal.t_final:
        raise DomainError(f"t={t} outside [0, {signal.t_final}]")
    return signal.resample(np.array([t]))[0]


@dataclass(frozen=True, eq=False)
class LatentTrajectory:
    dt: float
    states: np.ndarray

    @property
    def t_last(self) -> float:
        return self.dt * (self.states.shape[0] - 1)


@dataclass(frozen=True, eq=False)
class Dirichlet:
    """Strongly imposed values: ``y = lift(x) + mask(x) * (...)``.

    Both callables take an ``(M, d)`` array of points; ``lift`` returns
    ``(M, d_y)`` and ``mask`` returns ``(M,)`` and must vanish exactly on the
    constrained set.
    """

    lift: Callable
    mask: Callable


def n_steps(t_end: float, dt: float) -> int:
    """Number of Euler steps needed so that ``t_end`` is bracketed."""
    r = t_end / dt
    if abs(r - round(r)) < _SNAP:
        return max(1, int(round(r)))
    return max(1, int(np.ceil(r)))


def _locate(tau, dt, K):
    """Grid interval index and weight for times ``tau`` on ``[0, K dt]``."""
    r = np.asarray(tau, dtype=np.float64) / dt
    near = np.round(r)
    r = np.where(np.abs(r - near) < _SNAP, near, r)
    k = np.minimum(np.floor(r).astype(np.int64), K - 1)
    return k, r - k


@dataclass(frozen=True, eq=False)
class LDNet:
    """Dynamics and reconstruction networks plus their normalization layers."""

    dyn_net: DenseNetwork
    rec_net: DenseNetwork
    dt: float
    dt_ref: float
    u_norm: NormalizationSpec
    x_norm: NormalizationSpec
    out_norm: NormalizationSpec
    rec_uses_input: bool = False
    u_eq: Optional[np.ndarray] = None
    dirichlet: Optional[Dirichlet] = None

    def __post_init__(self):
        d_s = self.dyn_net.n_out
        if self.dyn_net.n_in != d_s + self.d_u:
            raise ShapeError(
                f"dyn_net takes {self.dyn_net.n_in} inputs, expected d_s + d_u = {d_s + self.d_u}"
            )
        n_rec_in = d_s + (self.d_u if self.rec_uses_input else 0) + self.d
        if self.rec_net.n_in != n_rec_in:
            raise ShapeError(f"rec_net takes {self.rec_net.n_in} inputs, expected {n_rec_in}")
        if self.rec_net.n_out != self.d_y:
            raise ShapeError(f"rec_net returns {self.rec_net.n_out} outputs, expected {self.d_y}")
        if not (self.dt > 0 and self.dt_ref > 0):
            raise ShapeError("dt and dt_ref must be positive")
        if self.u_eq is not None:
            ueq = np.atleast_1d(np.asarray(self.u_eq, dtype=np.float64)).copy()
            if ueq.shape != (self.d_u,):
                raise ShapeError(f"u_eq must have length {self.d_u}")
            ueq.flags.writeable = False
            object.__setattr__(self, "u_eq", ueq)

    @classmethod
    def create(
        cls,
        n_latent: int,
        dyn_hidden: Sequence[int],
        rec_hidden: Sequence[int],
        *,
        dt: float,
        dt_ref: float,
        u_norm: NormalizationSpec,
        x_norm: NormalizationSpec,
        out_norm: NormalizationSpec,
        seed: int = 0,
        rec_uses_input: bool = False,
        u_eq=None,
        dirichlet: Optional[Dirichlet] = None,
    ) -> "LDNet":
        """Glorot-initialised model; the two networks use init streams 0 and 1."""
        d_u, d, d_y = u_norm.size, x_norm.size, out_norm.size
        dyn_sizes = [n_latent + d_u, *dyn_hidden, n_latent]
        rec_sizes = [n_latent + (d_u if rec_uses_input else 0) + d, *rec_hidden, d_y]
        return cls(
            init_glorot(dyn_sizes, seed, 0),
            init_glorot(rec_sizes, seed, 1),
            dt,
            dt_ref,
            u_norm,
            x_norm,
            out_norm,
            rec_uses_input,
            u_eq,
            dirichlet,
        )

    @property
    def n_latent(self) -> int:
        return self.dyn_net.n_out

    @property
    def d_u(self) -> int:
        return self.u_norm.size

    @property
    def d(self) -> int:
        return self.x_norm.size

    @property
    def d_y(self) -> int:
        return self.out_norm.size

    @property
    def n_dyn(self) -> int:
        return self.dyn_net.n_params

    @property
    def params(self) -> np.ndarray:
        """Concatenation ``[theta_dyn, theta_rec]``."""
        return np.concatenate([self.dyn_net.params, self.rec_net.params])

    def with_params(self, theta) -> "LDNet":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_dyn + self.rec_net.n_params:
            raise ShapeError("parameter vector has the wrong length")
        return replace(
            self,
            dyn_net=self.dyn_net.with_params(theta[: self.n_dyn]),
            rec_net=self.rec_net.with_params(theta[self.n_dyn :]),
        )

    # -- checkpoints ---------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "kind": "ldnet",
            "n_latent": self.n_latent,
            "dyn_layer_sizes": list(self.dyn_net.layer_sizes),
            "rec_layer_sizes": list(self.rec_net.layer_sizes),
            "dt": self.dt,
            "dt_ref": self.dt_ref,
            "rec_uses_input": self.rec_uses_input,
            "u_eq": None if self.u_eq is None else self.u_eq.tolist(),
            "dirichlet": self.dirichlet is not None,
            "normalizations": {
                "u": self.u_norm.to_dict(),
                "x": self.x_norm.to_dict(),
                "y": self.out_norm.to_dict(),
            },
            "n_params": {"dyn": self.n_dyn, "rec": self.rec_net.n_params},
        }

    def save(self, path, extra: Optional[dict] = None):
        """Write ``<path>.json`` and ``<path>.bin`` (little-endian f8, dyn then rec).

        Dirichlet callables cannot be serialised; only a flag is stored and the
        constraint must be re-attached after :meth:`load`.
        """
        path = Path(path)
        meta = self.metadata()
        meta["param_file"] = path.name + ".bin"
        if extra:
            meta.update(extra)
        self.params.astype("<f8").tofile(path.with_name(path.name + ".bin"))
        path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path, dirichlet: Optional[Dirichlet] = None):
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        theta = np.fromfile(path.with_name(meta["param_file"]), dtype="<f8")
        n_dyn = meta["n_params"]["dyn"]
        norms = meta["normalizations"]
        model = cls(
            DenseNetwork(tuple(meta["dyn_layer_sizes"]), theta[:n_dyn]),
            DenseNetwork(tuple(meta["rec_layer_sizes"]), theta[n_dyn:]),
            meta["dt"],
            meta["dt_ref"],
            NormalizationSpec.from_dict(norms["u"]),
            NormalizationSpec.from_dict(norms["x"]),
            NormalizationSpec.from_dict(norms["y"]),
            meta["rec_uses_input"],
            meta["u_eq"],
            dirichlet,
        )
        return model, meta


# -- single-evaluation API ---------------------------------------------------


def _eq_output(model: LDNet, theta_dyn):
    if model.u_eq is None:
        return None, None
    X = np.concatenate([np.zeros(model.n_latent), model.u_norm.normalize(model.u_eq)])[None, :]
    out, cache = forward_flat(model.dyn_net.layer_sizes, theta_dyn, X)
    return out[0], cache


def latent_rhs(model: LDNet, s, u):
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if s.shape != (model.n_latent,) or u.shape != (model.d_u,):
        raise ShapeError(f"expected s of length {model.n_latent} and u of length {model.d_u}")
    out = model.dyn_net.forward(np.concatenate([s, model.u_norm.normalize(u)]))
    eq, _ = _eq_output(model, model.dyn_net.params)
    if eq is not None:
        out = out - eq
    return out / model.dt_ref


def integrate_latent(model: LDNet, signal: InputSignal, T: float) -> LatentTrajectory:
    if not T > 0:
        raise DomainError(f"final time must be positive, got {T}")
    if signal.d_u != model.d_u:
        raise ShapeError(f"signal has {signal.d_u} channels, model expects {model.d_u}")
    K = n_steps(T, model.dt)
    U = signal.resample(np.arange(K) * model.dt)[:, None, :]
    states, _ = _rollout(model, model.dyn_net.params, model.u_norm.normalize(U), cache=False)
    return LatentTrajectory(model.dt, states[:, 0, :])


def interpolate_latent(traj: LatentTrajectory, t: float):
    if t < 0 or t > traj.t_last * (1 + _SNAP):
        raise DomainError(f"t={t} outside [0, {traj.t_last}]")
    K = traj.states.shape[0] - 1
    if K == 0:
        return traj.states[0].copy()
    k, theta = _locate(np.array([t]), traj.dt, K)
    k, theta = int(k[0]), float(theta[0])
    return (1.0 - theta) * traj.states[k] + theta * traj.states[k + 1]


def _rec_inputs(model: LDNet, S, U, X):
    parts = [S]
    if model.rec_uses_input:
        parts.append(model.u_norm.normalize(U))
    parts.append(model.x_norm.normalize(X))
    return np.concatenate(parts, axis=1)


def _rec_output(model: LDNet, raw, X):
    """Map raw network outputs to physical outputs; also returns d y / d raw."""
    scale = np.broadcast_to(model.out_norm.half_width, raw.shape)
    if model.dirichlet is None:
        return model.out_norm.center + scale * raw, scale
    psi = np.asarray(model.dirichlet.mask(X), dtype=np.float64).reshape(-1, 1)
    lift = np.asarray(model.dirichlet.lift(X), dtype=np.float64).reshape(raw.shape)
    jac = psi * scale
    return lift + jac * raw, jac


def reconstruct(model: LDNet, s, u, x):
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if s.size != model.n_latent or u.size != model.d_u or x.size != model.d:
        raise ShapeError("latent/input/point dimensions do not match the model")
    Z = _rec_inputs(model, s[None], u[None], x[None])
    raw = model.rec_net(Z)
    return _rec_output(model, raw, x[None])[0][0]


def predict(model: LDNet, signal: InputSignal, obs_times, query_points):
    """Predicted fields at every ``(tau, xi)``.

    ``query_points`` is either one ``(n_p, d)`` array shared by all times or an
    ``(n_t, n_p, d)`` array.  Returns ``(n_t, n_p, d_y)``.
    """
    obs_times = np.atleast_1d(np.asarray(obs_times, dtype=np.float64))
    if np.any(obs_times < 0) or np.any(obs_times > signal.t_final):
        raise DomainError(f"observation times must lie in [0, {signal.t_final}]")
    batch = prepare_batch(model, [_Query(signal, obs_times, query_points)], with_targets=False)
    return _forward_batch(model, model.params, batch)[0][0]


@dataclass
class _Query:
    input: InputSignal
    times: np.ndarray
    points: np.ndarray
    outputs: Optional[np.ndarray] = None


# -- batched engine ------------------------------------------------------------


def _rollout(model: LDNet, theta_dyn, Uhat, cache=True, s0=None):
    """Forward Euler for all samples at once.

    ``Uhat`` has shape ``(K, n, d_u)`` (already normalized).  Returns the
    states ``(K + 1, n, d_s)`` and the per-step network caches.
    """
    sizes = model.dyn_net.layer_sizes
    K, n, _ = Uhat.shape
    d_s = sizes[-1]
    states = np.empty((K + 1, n, d_s))
    states[0] = 0.0 if s0 is None else s0
    eq, _ = _eq_output(model, theta_dyn)
    h = model.dt / model.dt_ref
    caches = []
    for k in range(K):
        out, c = forward_flat(sizes, theta_dyn, np.concatenate([states[k], Uhat[k]], axis=1))
        if eq is not None:
            out -= eq
        np.multiply(out, h, out=out)
        np.add(states[k], out, out=states[k + 1])
        if not np.all(np.isfinite(states[k + 1])):
            raise DivergenceError(f"non-finite latent state at Euler step {k + 1}", step=k + 1)
        if cache:
            caches.append(c)
    return states, caches


def _rollout_vjp(model: LDNet, theta_dyn, caches, G):
    """Adjoint sweep of the Euler recursion.

    ``G[k]`` is the loss cotangent on ``states[k]``.  Returns the gradient
    with respect to ``theta_dyn`` and the cotangent on the initial state.
    """
    sizes = model.dyn_net.layer_sizes
    d_s = sizes[-1]
    h = model.dt / model.dt_ref
    K = len(caches)
    lam = G[K].copy()
    grad = np.zeros_like(theta_dyn)
    eq_cot = np.zeros(d_s)
    for k in range(K - 1, -1, -1):
        cot = h * lam
        dX, dp = backward_flat(sizes, theta_dyn, caches[k], cot)
        grad += dp
        if model.u_eq is not None:
            eq_cot += cot.sum(axis=0)
        lam += dX[:, :d_s]
        lam += G[k]
    if model.u_eq is not None:
        _, eq_cache = _eq_output(model, theta_dyn)
        _, dp = backward_flat(sizes, theta_dyn, eq_cache, -eq_cot[None, :], need_input_grad=False)
        grad += dp
    return grad, lam


@dataclass
class ObservationBatch:
    """Flattened observation rows for a list of samples (parameter independent)."""

    n_samples: int
    K: int
    Uhat: np.ndarray  # (K, n, d_u) normalized inputs on the Euler grid
    sample: np.ndarray  # (M,) sample index per row
    k: np.ndarray  # (M,) grid interval per row
    theta: np.ndarray  # (M,) interpolation weight per row
    Z_fixed: np.ndarray  # (M, n_rec_in - d_s) normalized [u] and x columns
    X: np.ndarray  # (M, d) raw points (used by Dirichlet lift/mask)
    Y: Optional[np.ndarray]  # (M, d_y) targets
    w: np.ndarray  # (M,) nested-average weights
    shapes: list = field(default_factory=list)  # per-sample (n_t, n_p)
    offsets: list = field(default_factory=list)


def _sample_rows(sample):
    times = np.atleast_1d(np.asarray(sample.times, dtype=np.float64))
    P = np.asarray(sample.points, dtype=np.float64)
    n_t = times.size
    if P.ndim == 2:
        P = np.broadcast_to(P, (n_t,) + P.shape)
    if P.ndim != 3 or P.shape[0] != n_t:
        raise ShapeError(f"points must be (n_p, d) or (n_t, n_p, d), got {P.shape}")
    return times, P


def prepare_batch(model: LDNet, samples, with_targets: bool = True) -> ObservationBatch:
    samples = list(samples)
    if not samples:
        raise InvalidDatasetError("empty sample list")
    rows_t, rows_s, rows_x, rows_y, rows_w, rows_u = [], [], [], [], [], []
    shapes, offsets = [], []
    t_max = 0.0
    n = len(samples)
    pos = 0
    for i, smp in enumerate(samples):
        if smp.input.d_u != model.d_u:
            raise ShapeError(f"sample {i}: input has {smp.input.d_u} channels, model expects {model.d_u}")
        times, P = _sample_rows(smp)
        n_t, n_p, d = P.shape
        if n_t == 0 or n_p == 0:
            raise InvalidDatasetError(f"sample {i} has an empty observation set")
        if d != model.d:
            raise ShapeError(f"sample {i}: points have dimension {d}, model expects {model.d}")
        t_max = max(t_max, float(times.max()))
        tt = np.repeat(times, n_p)
        rows_t.append(tt)
        rows_s.append(np.full(tt.size, i))
        rows_x.append(P.reshape(-1, d))
        rows_w.append(np.full(tt.size, 1.0 / (n * n_t * n_p)))
        if model.rec_uses_input:
            rows_u.append(smp.input.resample(tt))
        if with_targets:
            Y = np.asarray(smp.outputs, dtype=np.float64)
            if Y.ndim == 2 and model.d_y == 1 and Y.shape == (n_t, n_p):
                Y = Y[..., None]
            if Y.shape != (n_t, n_p, model.d_y):
                raise ShapeError(f"sample {i}: outputs shape {Y.shape}, expected {(n_t, n_p, model.d_y)}")
            rows_y.append(Y.reshape(-1, model.d_y))
        shapes.append((n_t, n_p))
        offsets.append(pos)
        pos += tt.size
    K = n_steps(t_max, model.dt) if t_max > 0 else 1
    grid = np.arange(K) * model.dt
    Uhat = np.empty((K, n, model.d_u))
    for i, smp in enumerate(samples):
        Uhat[:, i, :] = model.u_norm.normalize(smp.input.resample(grid))
    T = np.concatenate(rows_t)
    k, theta = _locate(T, model.dt, K)
    X = np.concatenate(rows_x)
    fixed = []
    if model.rec_uses_input:
        fixed.append(model.u_norm.normalize(np.concatenate(rows_u)))
    fixed.append(model.x_norm.normalize(X))
    return ObservationBatch(
        n_samples=n,
        K=K,
        Uhat=Uhat,
        sample=np.concatenate(rows_s),
        k=k,
        theta=theta,
        Z_fixed=np.concatenate(fixed, axis=1),
        X=X,
        Y=np.concatenate(rows_y) if with_targets else None,
        w=np.concatenate(rows_w),
        shapes=shapes,
        offsets=offsets,
    )


def _gather_states(states, batch: ObservationBatch):
    th = batch.theta[:, None]
    return (1.0 - th) * states[batch.k, batch.sample] + th * states[batch.k + 1, batch.sample]


def _scatter_states(shape, batch: ObservationBatch, dS):
    """Adjoint of :func:`_gather_states`: accumulate row cotangents on the grid."""
    n_bins = shape[0] * shape[1]
    lin = batch.k * shape[1] + batch.sample
    th = batch.theta
    G = np.empty(shape)
    for c in range(shape[2]):
        col = dS[:, c]
        g = np.bincount(lin, weights=(1.0 - th) * col, minlength=n_bins)
        g[shape[1] :] += np.bincount(lin, weights=th * col, minlength=n_bins)[: n_bins - shape[1]]
        G[:, :, c] = g.reshape(shape[0], shape[1])
    return G


def _forward_rows(model, theta_rec, states, batch):
    S = _gather_states(states, batch)
    Z = np.concatenate([S, batch.Z_fixed], axis=1)
    raw, cache = forward_flat(model.rec_net.layer_sizes, theta_rec, Z)
    pred, jac = _rec_output(model, raw, batch.X)
    return pred, jac, cache


def _split_rows(rows, batch):
    out = []
    for (n_t, n_p), off in zip(batch.shapes, batch.offsets):
        out.append(rows[off : off + n_t * n_p].reshape(n_t, n_p, -1))
    return out


def _forward_batch(model: LDNet, theta, batch: ObservationBatch):
    theta = np.asarray(theta, dtype=np.float64)
    n_dyn = model.n_dyn
    states, _ = _rollout(model, theta[:n_dyn], batch.Uhat, cache=False)
    pred, _, _ = _forward_rows(model, theta[n_dyn:], states, batch)
    return _split_rows(pred, batch), states


def batch_predictions(model: LDNet, batch: ObservationBatch, theta=None):
    """Predictions for every sample of a prepared batch, as ``(n_t, n_p, d_y)`` arrays."""
    return _forward_batch(model, model.params if theta is None else theta, batch)[0]


def batch_loss(model: LDNet, theta, batch: ObservationBatch, spec: LossSpec):
    """Loss value only (no adjoint sweep)."""
    theta = np.asarray(theta, dtype=np.float64)
    n_dyn = model.n_dyn
    states, _ = _rollout(model, theta[:n_dyn], batch.Uhat, cache=False)
    pred, _, _ = _forward_rows(model, theta[n_dyn:], states, batch)
    E, _ = row_discrepancy(pred, batch.Y, spec)
    loss = float(np.dot(batch.w, E))
    loss += spec.alpha_dyn * regularization(theta[:n_dyn])[0]
    loss += spec.alpha_rec * regularization(theta[n_dyn:])[0]
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    return loss


def bptt_gradient(model: LDNet, batch, spec: LossSpec, theta=None):
    """Loss and its exact gradient by backpropagation through time.

    ``batch`` is an :class:`ObservationBatch` or a list of samples.  Returns
    ``(loss, grad_dyn, grad_rec)``; the gradient is taken at ``theta`` when
    given (a flat ``[theta_dyn, theta_rec]`` vector), else at the model's own
    parameters.
    """
    if not isinstance(batch, ObservationBatch):
        batch = prepare_batch(model, batch)
    theta = model.params if theta is None else np.asarray(theta, dtype=np.float64)
    n_dyn = model.n_dyn
    th_dyn, th_rec = theta[:n_dyn], theta[n_dyn:]

    states, caches = _rollout(model, th_dyn, batch.Uhat)
    pred, jac, rcache = _forward_rows(model, th_rec, states, batch)
    E, dE = row_discrepancy(pred, batch.Y, spec)
    loss = float(np.dot(batch.w, E))
    reg_dyn, dreg_dyn = regularization(th_dyn)
    reg_rec, dreg_rec = regularization(th_rec)
    loss += spec.alpha_dyn * reg_dyn + spec.alpha_rec * reg_rec
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")

    G_raw = (batch.w[:, None] * dE) * jac
    dZ, g_rec = backward_flat(model.rec_net.layer_sizes, th_rec, rcache, G_raw)
    dS = dZ[:, : model.n_latent]

    G = _scatter_states(states.shape, batch, dS)
    g_dyn, _ = _rollout_vjp(model, th_dyn, caches, G)

    g_dyn += spec.alpha_dyn * dreg_dyn
    g_rec += spec.alpha_rec * dreg_rec
    if not (np.all(np.isfinite(g_dyn)) and np.all(np.isfinite(g_rec))):
        raise DivergenceError("non-finite gradient")
    return loss, g_dyn, g_rec
