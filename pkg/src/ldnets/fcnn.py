"""Dense feed-forward networks with hand-written reverse-mode gradients.

Parameters are stored as one flat float64 vector.  The flattening order is
layer by layer; within a layer the weight matrix (shape ``(n_out, n_in)``)
comes first in row-major order, followed by the bias vector.  Hidden layers
use ``tanh``; the output layer is affine.

The batched kernels :func:`forward_flat` / :func:`backward_flat` operate on
``(M, n_in)`` arrays and are what the LDNet and baseline code call in their
inner loops; :class:`DenseNetwork` is the immutable user-facing wrapper.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _random
from .errors import InvalidArchitectureError, InvalidRangeError, ShapeError

__all__ = [
    "DenseNetwork",
    "NormalizationSpec",
    "init_glorot",
    "make_normalization",
    "n_params",
    "forward_flat",
    "backward_flat",
    "save_network",
    "load_network",
]


def _check_sizes(layer_sizes) -> tuple[int, ...]:
    try:
        sizes = tuple(int(n) for n in layer_sizes)
    except TypeError as exc:
        raise InvalidArchitectureError("layer_sizes must be a sequence of ints") from exc
    if len(sizes) < 2:
        raise InvalidArchitectureError(
            f"need at least input and output sizes, got {list(sizes)}"
        )
    if any(n <= 0 for n in sizes):
        raise InvalidArchitectureError(f"layer sizes must be positive, got {list(sizes)}")
    return sizes


def n_params(layer_sizes: Sequence[int]) -> int:
    sizes = _check_sizes(layer_sizes)
    return sum((n_in + 1) * n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def _unpack(sizes, params):
    """Views of the per-layer (W, b) blocks inside the flat vector."""
    layers = []
    pos = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = params[pos : pos + n_in * n_out].reshape(n_out, n_in)
        pos += n_in * n_out
        b = params[pos : pos + n_out]
        pos += n_out
        layers.append((W, b))
    return layers


def forward_flat(layer_sizes, params, X):
    """Evaluate the network on the rows of ``X``.

    Returns ``(Y, cache)`` where ``cache`` holds the layer inputs needed by
    :func:`backward_flat`.
    """
    layers = _unpack(layer_sizes, params)
    A = X
    cache = [X]
    for W, b in layers[:-1]:
        A = np.tanh(A @ W.T + b)
        cache.append(A)
    W, b = layers[-1]
    return A @ W.T + b, cache


def backward_flat(layer_sizes, params, cache, G, need_input_grad=True):
    """Reverse pass: pull the output cotangent ``G`` back through the network.

    Returns ``(dX, dparams)``; ``dX`` is ``None`` when ``need_input_grad`` is
    false (saves one matmul on the widest layer).
    """
    layers = _unpack(layer_sizes, params)
    dparams = np.empty_like(params)
    dlayers = _unpack(layer_sizes, dparams)
    n_layers = len(layers)
    for ell in range(n_layers - 1, -1, -1):
        W, _ = layers[ell]
        dW, db = dlayers[ell]
        A_in = cache[ell]
        np.matmul(G.T, A_in, out=dW)
        np.sum(G, axis=0, out=db)
        if ell == 0 and not need_input_grad:
            return None, dparams
        G = G @ W
        if ell > 0:
            G *= 1.0 - A_in * A_in
    return G, dparams


@dataclass(frozen=True, eq=False)
class DenseNetwork:
    """Immutable tanh network: ``layer_sizes`` plus a flat parameter vector."""

    layer_sizes: tuple
    params: np.ndarray

    def __post_init__(self):
        sizes = _check_sizes(self.layer_sizes)
        p = np.array(self.params, dtype=np.float64, copy=True).reshape(-1)
        if p.size != n_params(sizes):
            raise ShapeError(
                f"expected {n_params(sizes)} parameters for {list(sizes)}, got {p.size}"
            )
        p.flags.writeable = False
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "params", p)

    @classmethod
    def from_layers(cls, weights, biases):
        weights = [np.asarray(W, dtype=np.float64) for W in weights]
        biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in biases]
        if len(weights) != len(biases) or not weights:
            raise InvalidArchitectureError("need one bias per weight matrix")
        sizes = [weights[0].shape[1]] + [W.shape[0] for W in weights]
        for k, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ShapeError(f"layer {k}: inconsistent shapes {W.shape}, {b.shape}")
        flat = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(weights, biases)])
        return cls(tuple(sizes), flat)

    @classmethod
    def zeros(cls, layer_sizes):
        return cls(tuple(layer_sizes), np.zeros(n_params(layer_sizes)))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def weights(self):
        return [W for W, _ in _unpack(self.layer_sizes, self.params)]

    @property
    def biases(self):
        return [b for _, b in _unpack(self.layer_sizes, self.params)]

    def with_params(self, params) -> "DenseNetwork":
        return DenseNetwork(self.layer_sizes, params)

    def _check_batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ShapeError(f"expected input of shape (M, {self.n_in}), got {X.shape}")
        return X

    def __call__(self, X):
        """Batched evaluation on an ``(M, n_in)`` array."""
        return forward_flat(self.layer_sizes, self.params, self._check_batch(X))[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_in,):
            raise ShapeError(f"expected input of length {self.n_in}, got shape {x.shape}")
        return self(x[None, :])[0]

    def vjp(self, x, cotangent):
        """Return ``(cotangent @ d out/d x, cotangent @ d out/d params)``."""
        x = np.asarray(x, dtype=np.float64)
        cot = np.asarray(cotangent, dtype=np.float64)
        if x.shape != (self.n_in,):
            raise ShapeError(f"expected input of length {self.n_in}, got shape {x.shape}")
        if cot.shape != (self.n_out,):
            raise ShapeError(f"expected cotangent of length {self.n_out}, got shape {cot.shape}")
        _, cache = forward_flat(self.layer_sizes, self.params, x[None, :])
        dx, dp = backward_flat(self.layer_sizes, self.params, cache, cot[None, :].copy())
        return dx[0], dp


def init_glorot(layer_sizes: Sequence[int], seed: int, index: int = 0) -> DenseNetwork:
    """Glorot-uniform weights, zero biases.

    Weight ``W_k`` is drawn from ``U(-r, r)`` with
    ``r = sqrt(6 / (fan_in + fan_out))``.  The stream is
    ``(seed, "init", index)``; use distinct ``index`` values for networks
    initialised from the same seed.
    """
    sizes = _check_sizes(layer_sizes)
    rng = _random.stream(seed, "init", index)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        r = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-r, r, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return DenseNetwork.from_layers(weights, biases)


@dataclass(frozen=True, eq=False)
class NormalizationSpec:
    """Per-variable affine map ``v -> (v - center) / half_width``."""

    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=np.float64)).copy()
        w = np.atleast_1d(np.asarray(self.half_width, dtype=np.float64)).copy()
        if c.shape != w.shape or c.ndim != 1:
            raise ShapeError(f"center {c.shape} and half_width {w.shape} must be equal 1-D")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise InvalidRangeError(f"half_width entries must be positive, got {w}")
        c.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_width", w)

    @property
    def size(self) -> int:
        return self.center.size

    def normalize(self, v):
        return (np.asarray(v, dtype=np.float64) - self.center) / self.half_width

    def denormalize(self, v):
        return self.center + self.half_width * np.asarray(v, dtype=np.float64)

    @classmethod
    def identity(cls, n: int) -> "NormalizationSpec":
        return cls(np.zeros(n), np.ones(n))

    def to_dict(self):
        return {"center": self.center.tolist(), "half_width": self.half_width.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["half_width"])


def make_normalization(kind: str, a, b) -> NormalizationSpec:
    """Build a normalization from bounds or from sample statistics.

    ``kind="bounded"`` takes ``(min, max)`` and maps the interval onto
    ``[-1, 1]``.  ``kind="sampled"`` takes ``(mean, std)`` and uses three
    standard deviations as the half width.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if kind == "bounded":
        if np.any(b <= a):
            raise InvalidRangeError(f"need max > min, got min={a}, max={b}")
        return NormalizationSpec((a + b) / 2.0, (b - a) / 2.0)
    if kind == "sampled":
        if np.any(b <= 0):
            raise InvalidRangeError(f"need std > 0, got {b}")
        return NormalizationSpec(a, 3.0 * b)
    raise InvalidRangeError(f"unknown normalization kind {kind!r}")


def save_network(path, net: DenseNetwork, normalizations=None, extra=None):
    """Write ``<path>.json`` (metadata) and ``<path>.bin`` (little-endian f8)."""
    path = Path(path)
    meta = {
        "layer_sizes": list(net.layer_sizes),
        "n_params": net.n_params,
        "param_file": path.name + ".bin",
        "normalizations": {k: v.to_dict() for k, v in (normalizations or {}).items()},
    }
    if extra:
        meta.update(extra)
    net.params.astype("<f8").tofile(path.with_name(path.name + ".bin"))
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_network(path):
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    params = np.fromfile(path.with_name(meta["param_file"]), dtype="<f8")
    net = DenseNetwork(tuple(meta["layer_sizes"]), params)
    norms = {k: NormalizationSpec.from_dict(v) for k, v in meta["normalizations"].items()}
    return net, norms, meta
