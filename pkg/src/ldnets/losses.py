"""Pointwise discrepancy metrics and the L2 regularizer."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import InvalidSpecError, ShapeError

__all__ = [
    "LossSpec",
    "discrepancy_quadratic",
    "discrepancy_goal_oriented",
    "row_discrepancy",
    "regularization",
]


@dataclass(frozen=True)
class LossSpec:
    """Loss configuration.

    ``metric`` is ``"quadratic"`` (uses ``y_norm``) or ``"goal_oriented"``
    (uses ``v_norm``, ``gamma`` and ``eps``).  ``alpha_dyn`` / ``alpha_rec``
    weight the mean-of-squares penalty on each parameter vector.
    """

    metric: str = "quadratic"
    y_norm: float = 1.0
    v_norm: float = 1.0
    gamma: float = 0.1
    eps: float = 1e-4
    alpha_dyn: float = 0.0
    alpha_rec: float = 0.0

    def __post_init__(self):
        if self.metric not in ("quadratic", "goal_oriented"):
            raise InvalidSpecError(f"unknown metric {self.metric!r}")
        if self.metric == "quadratic" and not self.y_norm > 0:
            raise InvalidSpecError(f"y_norm must be positive, got {self.y_norm}")
        if self.metric == "goal_oriented":
            if not self.v_norm > 0:
                raise InvalidSpecError(f"v_norm must be positive, got {self.v_norm}")
            if not self.gamma >= 0:
                raise InvalidSpecError(f"gamma must be non-negative, got {self.gamma}")
            if not 0 < self.eps < 1:
                raise InvalidSpecError(f"eps must lie in (0, 1), got {self.eps}")
        if self.alpha_dyn < 0 or self.alpha_rec < 0:
            raise InvalidSpecError("regularization weights must be non-negative")

    def to_dict(self):
        return asdict(self)


def discrepancy_quadratic(pred, ref, y_norm: float) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if not y_norm > 0:
        raise InvalidSpecError(f"y_norm must be positive, got {y_norm}")
    d = pred - ref
    return float(np.dot(d.ravel(), d.ravel()) / y_norm**2)


def _direction(v, eps):
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / (eps + n), n


def discrepancy_goal_oriented(pred, ref, v_norm: float, gamma: float, eps: float) -> float:
    """Squared error plus ``gamma`` times the squared mismatch of flow directions."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if not v_norm > 0 or not eps > 0:
        raise InvalidSpecError("v_norm and eps must be positive")
    d = ref - pred
    q_ref, _ = _direction(ref, eps)
    q_pred, _ = _direction(pred, eps)
    dq = q_ref - q_pred
    return float(np.dot(d.ravel(), d.ravel()) / v_norm**2 + gamma * np.dot(dq.ravel(), dq.ravel()))


def row_discrepancy(pred, ref, spec: LossSpec):
    """Per-row discrepancy ``E`` (shape ``(M,)``) and ``dE/dpred`` (``(M, d_y)``)."""
    d = pred - ref
    if spec.metric == "quadratic":
        scale = 1.0 / spec.y_norm**2
        return np.einsum("ij,ij->i", d, d) * scale, 2.0 * scale * d
    scale = 1.0 / spec.v_norm**2
    q_ref, _ = _direction(ref, spec.eps)
    q_pred, n = _direction(pred, spec.eps)
    dq = q_pred - q_ref
    E = np.einsum("ij,ij->i", d, d) * scale + spec.gamma * np.einsum("ij,ij->i", dq, dq)
    g = 2.0 * spec.gamma * dq
    # Jacobian of p / (eps + |p|) is I/(eps+n) - p p^T / (n (eps+n)^2); the
    # second term vanishes as p -> 0.
    safe_n = np.where(n > 0, n, 1.0)
    pg = np.einsum("ij,ij->i", pred, g)[:, None]
    dE = 2.0 * scale * d + g / (spec.eps + n) - pred * pg / (safe_n * (spec.eps + n) ** 2)
    return E, dE


def regularization(theta):
    """Mean of squares and its gradient."""
    theta = np.asarray(theta)
    if theta.size == 0:
        return 0.0, np.zeros_like(theta)
    return float(np.mean(theta * theta)), 2.0 * theta / theta.size
