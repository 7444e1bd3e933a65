from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldnets.errors import DivergenceError, InvalidSpecError, ShapeError
from ldnets.fcnn import NormalizationSpec, make_normalization
from ldnets.losses import (
    LossSpec,
    discrepancy_goal_oriented,
    discrepancy_quadratic,
    regularization,
    row_discrepancy,
)
from ldnets.model import InputSignal, LDNet, predict
from ldnets.training import (
    AdamState,
    TrainingSchedule,
    adam_step,
    bfgs_run,
    run_two_stage,
    strong_wolfe_search,
    total_loss,
    train_two_stage,
)


@dataclass
class Obs:
    input: InputSignal
    times: np.ndarray
    points: np.ndarray
    outputs: np.ndarray


class TestDiscrepancy:
    def test_quadratic_value(self):
        assert discrepancy_quadratic([1.0, 2.0], [0.0, 0.0], 2.0) == pytest.approx(5.0 / 4.0, rel=1e-15)

    def test_quadratic_zero(self):
        assert discrepancy_quadratic([0.3, -1.0], [0.3, -1.0], 1.0) == 0.0

    def test_quadratic_bad_norm(self):
        with pytest.raises(InvalidSpecError):
            discrepancy_quadratic([1.0], [0.0], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            discrepancy_quadratic([1.0, 2.0], [1.0], 1.0)

    def test_goal_oriented_no_gamma(self):
        v = discrepancy_goal_oriented([1.0, 2.0], [0.0, 1.0], v_norm=2.0, gamma=0.0, eps=1e-4)
        assert v == pytest.approx(2.0 / 4.0, rel=1e-15)

    def test_goal_oriented_opposite(self):
        # opposite unit vectors: direction mismatch close to |2 e|^2 = 4
        v = discrepancy_goal_oriented([1.0, 0.0], [-1.0, 0.0], v_norm=1e6, gamma=1.0, eps=1e-12)
        assert v == pytest.approx(4.0, rel=1e-9)

    def test_goal_oriented_zero(self):
        assert discrepancy_goal_oriented([0.0, 0.0], [0.0, 0.0], 1.0, 0.1, 1e-4) == 0.0

    @pytest.mark.parametrize("metric", ["quadratic", "goal_oriented"])
    def test_row_matches_scalar(self, metric):
        rng = np.random.default_rng(0)
        P, R = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        spec = LossSpec(metric=metric, y_norm=1.7, v_norm=0.8, gamma=0.3, eps=1e-3)
        E, _ = row_discrepancy(P, R, spec)
        for i in range(6):
            ref = (
                discrepancy_quadratic(P[i], R[i], 1.7)
                if metric == "quadratic"
                else discrepancy_goal_oriented(P[i], R[i], 0.8, 0.3, 1e-3)
            )
            assert E[i] == pytest.approx(ref, rel=1e-13)

    @pytest.mark.parametrize("metric", ["quadratic", "goal_oriented"])
    def test_row_gradient_fd(self, metric):
        rng = np.random.default_rng(1)
        P, R = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        spec = LossSpec(metric=metric, y_norm=1.2, v_norm=0.9, gamma=0.5, eps=1e-2)
        _, dE = row_discrepancy(P, R, spec)
        h = 1e-6
        fd = np.zeros_like(P)
        for i in range(4):
            for j in range(3):
                Pp, Pm = P.copy(), P.copy()
                Pp[i, j] += h
                Pm[i, j] -= h
                fd[i, j] = (row_discrepancy(Pp, R, spec)[0][i] - row_discrepancy(Pm, R, spec)[0][i]) / (2 * h)
        assert np.linalg.norm(dE - fd) <= 1e-7 * np.linalg.norm(fd)

    @pytest.mark.parametrize(
        "kw", [{"metric": "l1"}, {"y_norm": 0.0}, {"metric": "goal_oriented", "eps": 0.0}, {"alpha_dyn": -1.0}]
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(InvalidSpecError):
            LossSpec(**kw)


def test_regularization():
    r, g = regularization(np.array([1.0, 2.0, 3.0, 4.0]))
    assert r == pytest.approx(30.0 / 4.0, rel=1e-15)
    assert np.allclose(g, [0.5, 1.0, 1.5, 2.0], rtol=1e-15, atol=0)


def ident_model(d_s=1, seed=0, **kw):
    ident = NormalizationSpec([0.0], [1.0])
    return LDNet.create(d_s, [3], [4], dt=0.1, dt_ref=1.0, u_norm=ident, x_norm=ident, out_norm=ident, seed=seed, **kw)


def brute_loss(model, samples, y_norm, alpha_dyn=0.0, alpha_rec=0.0):
    """Nested average computed from predictions with explicit Python loops."""
    per_sample = []
    for s in samples:
        pred = predict(model, s.input, s.times, s.points) if s.points.ndim == 2 else None
        per_time = []
        for a, t in enumerate(s.times):
            pts = s.points[a] if s.points.ndim == 3 else s.points
            out = predict(model, s.input, [t], pts)[0]
            ref = s.outputs[a]
            per_time.append(np.mean([np.sum((out[b] - ref[b]) ** 2) / y_norm**2 for b in range(len(pts))]))
        per_sample.append(np.mean(per_time))
    loss = np.mean(per_sample)
    loss += alpha_dyn * np.mean(model.dyn_net.params**2) + alpha_rec * np.mean(model.rec_net.params**2)
    return loss


class TestTotalLoss:
    def test_nested_average_unequal_sizes(self):
        rng = np.random.default_rng(2)
        model = ident_model()
        model = model.with_params(rng.normal(scale=0.5, size=model.params.size))
        samples = []
        for n_t, n_p in [(2, 3), (5, 1), (1, 7)]:
            sig = InputSignal([0.0, 1.0], rng.normal(size=(2, 1)))
            times = np.sort(rng.uniform(0, 1, n_t))
            pts = rng.uniform(-1, 1, size=(n_t, n_p, 1))
            samples.append(Obs(sig, times, pts, rng.normal(size=(n_t, n_p, 1))))
        spec = LossSpec(y_norm=1.4, alpha_dyn=0.01, alpha_rec=0.02)
        assert total_loss(model, samples, spec) == pytest.approx(brute_loss(model, samples, 1.4, 0.01, 0.02), rel=1e-12)

    def test_not_flat_average(self):
        # one sample with 1 point and one with 9: the nested mean weighs them equally
        model = ident_model()
        model = model.with_params(np.zeros_like(model.params))
        sig = InputSignal.constant([0.0], 1.0)
        a = Obs(sig, np.array([1.0]), np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
        b = Obs(sig, np.array([1.0]), np.zeros((1, 9, 1)), np.zeros((1, 9, 1)))
        assert total_loss(model, [a, b], LossSpec(y_norm=1.0)) == pytest.approx(0.5, rel=1e-15)


class TestAdam:
    def test_first_step(self):
        # after one step with gradient g, m_hat = g and v_hat = g^2
        s = adam_step(AdamState.start([1.0, -2.0]), np.array([0.5, -4.0]), lr=0.1)
        expect = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -4.0]) / (np.array([0.5, 4.0]) + 1e-8)
        assert np.allclose(s.params, expect, rtol=0, atol=1e-15)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(3)
        grads = rng.normal(size=(10, 3))
        s = AdamState.start(np.zeros(3))
        x, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
        for t, g in enumerate(grads, start=1):
            s = adam_step(s, g, lr=1e-2)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g**2
            x = x - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(s.params, x, rtol=0, atol=1e-15) and s.step == 10

    def test_nonfinite(self):
        with pytest.raises(DivergenceError):
            adam_step(AdamState.start([0.0]), np.array([np.nan]), lr=0.1)

    def test_quadratic_convergence(self):
        x = AdamState.start([3.0, -1.0])
        for _ in range(2000):
            x = adam_step(x, 2 * x.params, lr=1e-2)
        assert np.max(np.abs(x.params)) < 1e-2


def rosenbrock(x):
    f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
    return f, g


class TestBFGS:
    def test_quadratic_finite_termination(self):
        rng = np.random.default_rng(4)
        A = rng.normal(size=(6, 6))
        A = A @ A.T + 6 * np.eye(6)
        b = rng.normal(size=6)
        res = bfgs_run(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(6), 50, gtol=1e-10)
        assert np.allclose(res.x, np.linalg.solve(A, b), rtol=0, atol=1e-8)

    def test_rosenbrock(self):
        res = bfgs_run(rosenbrock, np.array([-1.2, 1.0]), 200, gtol=1e-9)
        assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)

    def test_monotone(self):
        res = bfgs_run(rosenbrock, np.array([-1.2, 1.0]), 30)
        h = [rosenbrock(np.array([-1.2, 1.0]))[0], *res.history]
        assert all(b <= a for a, b in zip(h, h[1:]))

    def test_epoch_budget(self):
        res = bfgs_run(rosenbrock, np.array([-1.2, 1.0]), 7)
        assert res.n_iter == 7 and len(res.history) == 7

    def test_wolfe_conditions(self):
        x = np.array([-1.2, 1.0])
        f0, g0 = rosenbrock(x)
        p = -g0
        alpha, f1, g1 = strong_wolfe_search(rosenbrock, x, f0, g0, p, alpha0=1.0 / np.linalg.norm(p))
        assert f1 <= f0 + 1e-4 * alpha * (g0 @ p)
        assert abs(g1 @ p) <= 0.9 * abs(g0 @ p)


class TestTwoStage:
    def test_history_layout(self):
        sched = TrainingSchedule(adam_epochs=3, bfgs_epochs=4)
        fun = lambda x: (float(x @ x), 2 * x)
        theta, hist = run_two_stage(fun, np.array([1.0, 2.0]), sched)
        assert [h[1] for h in hist[:3]] == ["adam"] * 3
        assert [h[0] for h in hist] == list(range(1, 1 + len(hist)))
        assert hist[0][2] == 5.0

    def test_zero_epochs_identity(self):
        m = ident_model()
        sig = InputSignal.constant([0.0], 1.0)
        smp = [Obs(sig, np.array([1.0]), np.zeros((1, 1, 1)), np.ones((1, 1, 1)))]
        trained, hist = train_two_stage(m, smp, LossSpec(), TrainingSchedule(0, 1e-2, 0))
        assert trained is m and hist == []

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        sig = InputSignal([0.0, 1.0], [[0.0], [1.0]])
        smp = [Obs(sig, np.linspace(0.1, 1, 4), np.linspace(-1, 1, 3)[:, None], rng.normal(size=(4, 3, 1)))]
        sched = TrainingSchedule(adam_epochs=5, bfgs_epochs=5)
        a, ha = train_two_stage(ident_model(seed=1), smp, LossSpec(), sched)
        b, hb = train_two_stage(ident_model(seed=1), smp, LossSpec(), sched)
        assert a.params.tobytes() == b.params.tobytes() and ha == hb

    def test_fits_linear_relaxation(self):
        # y(t) = 1 - exp(-t) is the response of ds/dt = u - s with u = 1
        t = np.linspace(0.1, 2.0, 20)
        sig = InputSignal.constant([1.0], 2.0)
        smp = [Obs(sig, t, np.zeros((1, 1)), (1 - np.exp(-t))[:, None, None])]
        m0 = ident_model(seed=3)
        spec = LossSpec(y_norm=1.0)
        start = total_loss(m0, smp, spec)
        m, _ = train_two_stage(m0, smp, spec, TrainingSchedule(adam_epochs=50, bfgs_epochs=100))
        assert total_loss(m, smp, spec) < 1e-3 * start

    def test_divergence_reported(self):
        def fun(x):
            return (np.nan, np.zeros_like(x)) if x[0] < 0.5 else (float(x @ x), 2 * x)

        with pytest.raises(DivergenceError) as err:
            run_two_stage(fun, np.array([1.0]), TrainingSchedule(adam_epochs=200, adam_lr0=0.1, bfgs_epochs=0))
        assert err.value.stage == "adam" and err.value.step > 1
