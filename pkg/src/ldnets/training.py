"""Loss assembly and the two-stage (Adam, then BFGS) optimizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, InvalidDatasetError, InvalidSpecError, InvalidStartError, ShapeError
from .losses import (
    LossSpec,
    discrepancy_goal_oriented,
    discrepancy_quadratic,
    regularization,
    row_discrepancy,
)
from .model import LDNet, ObservationBatch, batch_loss, bptt_gradient, prepare_batch

__all__ = [
    "LossSpec",
    "TrainingSchedule",
    "AdamState",
    "BFGSResult",
    "discrepancy_quadratic",
    "discrepancy_goal_oriented",
    "total_loss",
    "adam_step",
    "bfgs_run",
    "LDNetObjective",
    "train_two_stage",
    "run_two_stage",
]

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9


@dataclass(frozen=True)
class TrainingSchedule:
    adam_epochs: int = 200
    adam_lr0: float = 1e-2
    bfgs_epochs: int = 500
    seed: int = 0
    bfgs_gtol: float = 1e-12

    def __post_init__(self):
        if self.adam_epochs < 0 or self.bfgs_epochs < 0:
            raise InvalidSpecError("epoch counts must be non-negative")
        if not self.adam_lr0 > 0:
            raise InvalidSpecError(f"adam_lr0 must be positive, got {self.adam_lr0}")

    def to_dict(self):
        return asdict(self)


def total_loss(model: LDNet, dataset, loss_spec: LossSpec, theta=None) -> float:
    """Nested-average discrepancy plus L2 penalties.

    ``dataset`` is a sequence of samples (anything with ``input``, ``times``,
    ``points``, ``outputs``) or a prepared :class:`ObservationBatch`.
    """
    if not isinstance(dataset, ObservationBatch):
        samples = list(getattr(dataset, "samples", dataset))
        if not samples:
            raise InvalidDatasetError("dataset is empty")
        dataset = prepare_batch(model, samples)
    return batch_loss(model, model.params if theta is None else theta, dataset, loss_spec)


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def start(cls, params):
        params = np.array(params, dtype=np.float64)
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(state: AdamState, gradient, lr: float) -> AdamState:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.params.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {state.params.shape}")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient in Adam", step=state.step + 1, stage="adam")
    t = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return AdamState(params, m, v, t)


# -- BFGS ----------------------------------------------------------------------


@dataclass
class BFGSResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    n_iter: int
    history: list
    message: str


def _safe_eval(fun, x):
    try:
        f, g = fun(x)
    except DivergenceError:
        return np.inf, None
    if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        return np.inf, None
    return float(f), np.asarray(g, dtype=np.float64)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolant on [a, b] (None if undefined)."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _zoom(phi, lo, hi, f0, d0, c1, c2, max_iter=30):
    a_lo, f_lo, d_lo = lo
    a_hi, f_hi, d_hi = hi
    for _ in range(max_iter):
        a = None
        if np.isfinite(f_hi) and d_hi is not None:
            a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        lo_b, hi_b = min(a_lo, a_hi), max(a_lo, a_hi)
        margin = 0.1 * (hi_b - lo_b)
        if a is None or not (lo_b + margin <= a <= hi_b - margin):
            a = 0.5 * (a_lo + a_hi)
        fa, ga, da = phi(a)
        if not np.isfinite(fa) or fa > f0 + c1 * a * d0 or fa >= f_lo:
            a_hi, f_hi, d_hi = a, fa, da
        else:
            if abs(da) <= -c2 * d0:
                return a, fa, ga
            if da * (a_hi - a_lo) >= 0:
                a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
            a_lo, f_lo, d_lo = a, fa, da
        if abs(a_hi - a_lo) <= 1e-16 * max(1.0, abs(a_lo)):
            break
    return None


def strong_wolfe_search(fun, x, f0, g0, p, alpha0=1.0, c1=WOLFE_C1, c2=WOLFE_C2, max_iter=25):
    """Step length satisfying the strong Wolfe conditions.

    Bracketing phase followed by cubic-interpolation zoom.  Returns
    ``(alpha, f, g)`` or ``None`` on failure.  Non-finite objective values
    (divergent trajectories) are treated as ``+inf`` and force a shorter step.
    """
    d0 = float(g0 @ p)
    if d0 >= 0:
        return None

    def phi(a):
        f, g = _safe_eval(fun, x + a * p)
        return f, g, (None if g is None else float(g @ p))

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha0
    for i in range(max_iter):
        fa, ga, da = phi(a)
        if not np.isfinite(fa) or fa > f0 + c1 * a * d0 or (i > 0 and fa >= f_prev):
            return _zoom(phi, (a_prev, f_prev, d_prev), (a, fa, da), f0, d0, c1, c2)
        if abs(da) <= -c2 * d0:
            return a, fa, ga
        if da >= 0:
            return _zoom(phi, (a, fa, da), (a_prev, f_prev, d_prev), f0, d0, c1, c2)
        a_prev, f_prev, d_prev = a, fa, da
        a = 2.0 * a
    return None


def bfgs_run(
    fun: Callable,
    x0,
    max_epochs: int,
    gtol: float = 1e-12,
    callback: Optional[Callable] = None,
) -> BFGSResult:
    """Dense BFGS on ``fun(x) -> (f, grad)``.

    One epoch is one accepted iteration.  The first step is scaled so that
    it has unit length; the inverse Hessian is rescaled by ``s.y / y.y``
    before the first update.  Stops after ``max_epochs`` iterations, when
    ``|grad|_inf <= gtol``, or when the line search fails; the returned point
    is never worse than ``x0``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = _safe_eval(fun, x)
    if not np.isfinite(f):
        raise InvalidStartError("objective is not finite at the starting point")
    n = x.size
    H = np.eye(n)
    history = []
    first = True
    message = "max_epochs reached"
    it = 0
    while it < max_epochs:
        if np.max(np.abs(g)) <= gtol:
            message = "gradient tolerance reached"
            break
        p = -H @ g
        if g @ p >= 0:  # H lost positive definiteness through roundoff
            H = np.eye(n)
            p = -g
        alpha0 = min(1.0, 1.0 / np.linalg.norm(p)) if first else 1.0
        res = strong_wolfe_search(fun, x, f, g, p, alpha0)
        if res is None:
            if not first and not np.array_equal(H, np.eye(n)):
                H = np.eye(n)
                first = True
                continue
            message = "line search failed"
            break
        alpha, f_new, g_new = res
        s = alpha * p
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-300:
            if first:
                H *= sy / float(y @ y)
            rho = 1.0 / sy
            Hy = H @ y
            H += (rho * rho * float(y @ Hy) + rho) * np.outer(s, s) - rho * (
                np.outer(Hy, s) + np.outer(s, Hy)
            )
        first = False
        x = x + s
        f, g = f_new, g_new
        it += 1
        history.append(f)
        if callback is not None:
            callback(it, x, f)
    else:
        if np.max(np.abs(g)) <= gtol:
            message = "gradient tolerance reached"
    return BFGSResult(x, f, g, it, history, message)


# -- LDNet training ----------------------------------------------------------------


class LDNetObjective:
    """``theta -> (loss, grad)`` for a fixed model layout, data and loss."""

    def __init__(self, model: LDNet, samples, loss_spec: LossSpec):
        self.model = model
        self.spec = loss_spec
        self.batch = samples if isinstance(samples, ObservationBatch) else prepare_batch(model, samples)
        self.n_evals = 0

    def __call__(self, theta):
        self.n_evals += 1
        loss, g_dyn, g_rec = bptt_gradient(self.model, self.batch, self.spec, theta=theta)
        return loss, np.concatenate([g_dyn, g_rec])

    def value(self, theta):
        return batch_loss(self.model, theta, self.batch, self.spec)


def run_two_stage(fun, theta0, schedule: TrainingSchedule, progress=None):
    """Adam then BFGS on a generic ``fun(theta) -> (f, grad)``.

    Returns ``(theta, history)`` where ``history`` rows are
    ``(epoch, stage, loss)``.  Adam rows record the loss at the start of each
    epoch; BFGS rows record the loss after each accepted iteration.
    """
    history = []
    theta = np.array(theta0, dtype=np.float64)
    if schedule.adam_epochs > 0:
        state = AdamState.start(theta)
        for epoch in range(1, schedule.adam_epochs + 1):
            try:
                f, g = fun(state.params)
            except DivergenceError as exc:
                raise DivergenceError(f"Adam epoch {epoch}: {exc}", step=epoch, stage="adam") from exc
            if not np.isfinite(f):
                raise DivergenceError(f"Adam epoch {epoch}: non-finite loss", step=epoch, stage="adam")
            history.append((epoch, "adam", float(f)))
            if progress:
                progress(epoch, "adam", f)
            try:
                state = adam_step(state, g, schedule.adam_lr0)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), step=epoch, stage="adam") from exc
        theta = state.params
    if schedule.bfgs_epochs > 0:
        offset = schedule.adam_epochs

        def cb(it, x, f):
            history.append((offset + it, "bfgs", float(f)))
            if progress:
                progress(offset + it, "bfgs", f)

        try:
            res = bfgs_run(fun, theta, schedule.bfgs_epochs, gtol=schedule.bfgs_gtol, callback=cb)
        except InvalidStartError as exc:
            raise DivergenceError(
                f"BFGS start (epoch {offset}): {exc}", step=offset, stage="bfgs"
            ) from exc
        log.info("BFGS stopped after %d iterations: %s", res.n_iter, res.message)
        theta = res.x
    return theta, history


def train_two_stage(model: LDNet, dataset, loss_spec: LossSpec, schedule: TrainingSchedule, progress=None):
    """Train both networks jointly; returns ``(trained_model, history)``."""
    samples = dataset if isinstance(dataset, ObservationBatch) else list(getattr(dataset, "samples", dataset))
    if not isinstance(samples, ObservationBatch) and not samples:
        raise InvalidDatasetError("dataset is empty")
    if schedule.adam_epochs == 0 and schedule.bfgs_epochs == 0:
        return model, []
    objective = LDNetObjective(model, samples, loss_spec)
    theta, history = run_two_stage(objective, model.params, schedule, progress)
    return model.with_params(theta), history
