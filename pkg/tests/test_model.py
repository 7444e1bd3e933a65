from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldnets.errors import DivergenceError, DomainError, ShapeError
from ldnets.fcnn import DenseNetwork, NormalizationSpec, init_glorot, make_normalization, n_params
from ldnets.losses import LossSpec
from ldnets.model import (
    Dirichlet,
    InputSignal,
    LatentTrajectory,
    LDNet,
    bptt_gradient,
    integrate_latent,
    interpolate_latent,
    latent_rhs,
    predict,
    prepare_batch,
    reconstruct,
    sample_input_at,
)


@dataclass
class Obs:
    input: InputSignal
    times: np.ndarray
    points: np.ndarray
    outputs: np.ndarray


def make_model(d_s=2, d_u=2, d=1, d_y=1, dyn=(6,), rec=(7,), dt=0.1, dt_ref=0.7, seed=0, **kw):
    return LDNet.create(
        d_s,
        list(dyn),
        list(rec),
        dt=dt,
        dt_ref=dt_ref,
        u_norm=NormalizationSpec(np.linspace(0.1, 0.3, d_u), np.linspace(1.0, 2.0, d_u)),
        x_norm=make_normalization("bounded", [-1.0] * d, [1.0] * d),
        out_norm=NormalizationSpec(np.full(d_y, 0.2), np.full(d_y, 1.5)),
        seed=seed,
        **kw,
    )


def randomize(model, seed, scale=0.6):
    rng = np.random.default_rng(seed)
    return model.with_params(rng.normal(scale=scale, size=model.params.size))


def random_samples(model, n, n_t, n_p, t_end, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        grid = np.linspace(0, t_end, 6)
        sig = InputSignal(grid, rng.normal(size=(6, model.d_u)), t_final=t_end)
        times = np.sort(rng.uniform(0, t_end, size=n_t))
        pts = rng.uniform(-1, 1, size=(n_t, n_p, model.d))
        out.append(Obs(sig, times, pts, rng.normal(size=(n_t, n_p, model.d_y))))
    return out


class TestInputSignal:
    def test_midpoint(self):
        s = InputSignal([0.0, 1.0], [[0.0], [2.0]])
        assert sample_input_at(s, 0.5)[0] == 1.0

    def test_sample_time_exact(self):
        v = np.random.default_rng(0).normal(size=(5, 2))
        s = InputSignal(np.linspace(0, 1, 5), v)
        assert np.array_equal(sample_input_at(s, 0.25), v[1])

    def test_constant(self):
        s = InputSignal.constant([1.5, -2.0], 3.0)
        for t in (0.0, 1.3, 3.0):
            assert np.array_equal(sample_input_at(s, t), [1.5, -2.0])

    def test_clamps_inside_domain(self):
        s = InputSignal([1.0, 2.0], [[3.0], [4.0]], t_final=5.0)
        assert sample_input_at(s, 0.0)[0] == 3.0 and sample_input_at(s, 5.0)[0] == 4.0

    @pytest.mark.parametrize("t", [-0.1, 1.1])
    def test_out_of_domain(self, t):
        with pytest.raises(DomainError):
            sample_input_at(InputSignal([0.0, 1.0], [[0.0], [1.0]]), t)

    def test_not_increasing(self):
        with pytest.raises(ShapeError):
            InputSignal([0.0, 0.0], [[1.0], [2.0]])


class TestLatentRHS:
    def test_equilibrium_zero(self):
        m = randomize(make_model(u_eq=[0.4, -0.3]), 1)
        assert np.array_equal(latent_rhs(m, np.zeros(2), np.array([0.4, -0.3])), np.zeros(2))

    def test_zero_net(self):
        m = make_model()
        m = m.with_params(np.zeros_like(m.params))
        assert not latent_rhs(m, np.ones(2), np.ones(2)).any()

    def test_formula(self):
        m = randomize(make_model(dyn=(5, 4)), 2)
        s, u = np.array([0.3, -0.1]), np.array([0.5, 1.2])
        uh = (u - m.u_norm.center) / m.u_norm.half_width
        a = np.concatenate([s, uh])
        Ws, bs = m.dyn_net.weights, m.dyn_net.biases
        for W, b in zip(Ws[:-1], bs[:-1]):
            a = np.tanh(W @ a + b)
        ref = (Ws[-1] @ a + bs[-1]) / m.dt_ref
        assert np.max(np.abs(latent_rhs(m, s, u) - ref)) <= 1e-14

    def test_shape(self):
        with pytest.raises(ShapeError):
            latent_rhs(make_model(), np.zeros(3), np.zeros(2))


def linear_model(a, c=0.0, dt=0.1, dt_ref=1.0):
    """Scalar model with rhs = a s + c via an affine dynamics net (d_u = 1)."""
    dyn = DenseNetwork.from_layers([np.array([[a * dt_ref, 0.0]])], [np.array([c * dt_ref])])
    rec = DenseNetwork.from_layers([np.array([[1.0, 0.0]])], [np.array([0.0])])
    ident = NormalizationSpec([0.0], [1.0])
    return LDNet(dyn, rec, dt, dt_ref, ident, ident, ident)


class TestIntegrate:
    def test_constant_rhs(self):
        m = linear_model(0.0, c=0.7, dt=0.1)
        traj = integrate_latent(m, InputSignal.constant([0.0], 1.0), 1.0)
        k = np.arange(11)
        assert np.allclose(traj.states[:, 0], k * 0.1 * 0.7, rtol=0, atol=1e-15)

    def test_linear_decay_from_zero(self):
        m = linear_model(-1.0)
        traj = integrate_latent(m, InputSignal.constant([0.0], 1.0), 1.0)
        assert traj.states.shape == (11, 1)
        assert not traj.states.any()

    def test_linear_recurrence_from_one(self):
        # with s(0) = 0 built in, feed a unit kick through the input channel on
        # the first step so that s_1 = dt, then s_k = dt * 0.9**(k - 1)
        dyn = DenseNetwork.from_layers([np.array([[-1.0, 1.0 / 0.1]])], [np.array([0.0])])
        rec = DenseNetwork.from_layers([np.array([[1.0, 0.0]])], [np.array([0.0])])
        ident = NormalizationSpec([0.0], [1.0])
        m = LDNet(dyn, rec, 0.1, 1.0, ident, ident, ident)
        sig = InputSignal([0.0, 0.1 - 1e-12, 0.1], [[1.0], [1.0], [0.0]], t_final=1.1)
        traj = integrate_latent(m, sig, 1.1)
        s = [0.0]
        for k in range(11):
            u = 1.0 if k == 0 else 0.0
            s.append(s[-1] + 0.1 * (-s[-1] + 10.0 * u))
        assert np.allclose(traj.states[:, 0], s, rtol=0, atol=1e-15)
        assert traj.states[11, 0] == pytest.approx(0.9**10, rel=1e-13)

    def test_equilibrium_trajectory(self):
        m = randomize(make_model(u_eq=[0.2, 0.1]), 3)
        traj = integrate_latent(m, InputSignal.constant([0.2, 0.1], 2.0), 2.0)
        assert not traj.states.any()

    def test_noninteger_horizon(self):
        m = randomize(make_model(dt=0.3), 3)
        traj = integrate_latent(m, InputSignal.constant([0.0, 0.0], 1.0), 1.0)
        assert traj.states.shape[0] == 5  # ceil(1 / 0.3) steps plus the initial state

    def test_divergence_reports_step(self):
        m = linear_model(1e300, c=1e300, dt=1.0)
        with pytest.raises(DivergenceError) as err:
            integrate_latent(m, InputSignal.constant([0.0], 5.0), 5.0)
        assert err.value.step is not None and "step" in str(err.value)


class TestInterpolate:
    def test_grid_exact(self):
        S = np.random.default_rng(0).normal(size=(5, 3))
        tr = LatentTrajectory(0.1, S)
        for k in range(5):
            assert np.array_equal(interpolate_latent(tr, k * 0.1), S[k])

    def test_midpoint(self):
        S = np.random.default_rng(1).normal(size=(4, 2))
        tr = LatentTrajectory(0.5, S)
        assert np.allclose(interpolate_latent(tr, 0.75), 0.5 * (S[1] + S[2]), rtol=0, atol=1e-15)

    def test_constant(self):
        tr = LatentTrajectory(0.2, np.tile([1.0, 2.0], (6, 1)))
        for t in np.linspace(0, 1, 13):
            assert np.allclose(interpolate_latent(tr, t), [1.0, 2.0], rtol=0, atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            interpolate_latent(LatentTrajectory(0.1, np.zeros((3, 1))), 0.5)


class TestReconstruct:
    def test_zero_rec_gives_center(self):
        m = make_model(d_y=2)
        m = m.with_params(np.concatenate([m.dyn_net.params, np.zeros(m.rec_net.n_params)]))
        out = reconstruct(m, [0.3, 0.1], [1.0, 2.0], [0.4])
        assert np.array_equal(out, m.out_norm.center)

    def test_formula(self):
        m = randomize(make_model(rec=(5, 6), rec_uses_input=True, d=2), 5)
        s, u, x = np.array([0.2, -0.4]), np.array([0.5, 0.1]), np.array([0.3, -0.8])
        a = np.concatenate([s, (u - m.u_norm.center) / m.u_norm.half_width, x])
        Ws, bs = m.rec_net.weights, m.rec_net.biases
        for W, b in zip(Ws[:-1], bs[:-1]):
            a = np.tanh(W @ a + b)
        ref = m.out_norm.center + m.out_norm.half_width * (Ws[-1] @ a + bs[-1])
        assert np.max(np.abs(reconstruct(m, s, u, x) - ref)) <= 1e-14

    def test_dirichlet_exact(self):
        lift = lambda X: np.sin(3 * X[:, :1])
        mask = lambda X: (1 - X[:, 0]) * (1 + X[:, 0])
        m = randomize(make_model(dirichlet=Dirichlet(lift, mask)), 6, scale=3.0)
        for x in (-1.0, 1.0):
            assert reconstruct(m, [5.0, -7.0], [1.0, 1.0], [x])[0] == np.sin(3 * x)


class TestPredict:
    def test_composition(self):
        m = randomize(make_model(rec_uses_input=True), 7)
        sig = InputSignal(np.linspace(0, 1, 5), np.random.default_rng(0).normal(size=(5, 2)))
        times = np.array([0.0, 0.13, 0.5, 1.0])
        pts = np.array([[-0.5], [0.0], [0.9]])
        pred = predict(m, sig, times, pts)
        traj = integrate_latent(m, sig, 1.0)
        for a, t in enumerate(times):
            for b, x in enumerate(pts):
                ref = reconstruct(m, interpolate_latent(traj, t), sample_input_at(sig, t), x)
                assert np.allclose(pred[a, b], ref, rtol=0, atol=1e-15)

    def test_repeated_points(self):
        m = randomize(make_model(), 8)
        sig = InputSignal.constant([0.1, 0.2], 1.0)
        pred = predict(m, sig, [0.5, 1.0], np.array([[0.3], [0.3]]))
        assert np.array_equal(pred[:, 0], pred[:, 1])

    def test_permutation(self):
        m = randomize(make_model(), 9)
        sig = InputSignal.constant([0.1, 0.2], 1.0)
        pts = np.linspace(-1, 1, 7)[:, None]
        perm = np.random.default_rng(0).permutation(7)
        a = predict(m, sig, [0.4, 0.9], pts)
        b = predict(m, sig, [0.4, 0.9], pts[perm])
        assert np.array_equal(a[:, perm], b)

    def test_equilibrium_constant_in_time(self):
        m = randomize(make_model(u_eq=[0.0, 0.0]), 10)
        pred = predict(m, InputSignal.constant([0.0, 0.0], 3.0), np.linspace(0, 3, 7), np.linspace(-1, 1, 5)[:, None])
        assert np.all(pred == pred[0])

    def test_causality(self):
        m = randomize(make_model(dt=0.1), 11)
        rng = np.random.default_rng(0)
        grid = np.linspace(0, 2, 21)
        sig = InputSignal(grid, rng.normal(size=(21, 2)))
        t_star = 1.2
        cut = InputSignal(grid[grid <= t_star], sig.values[grid <= t_star], t_final=2.0)
        times = np.linspace(0, t_star - 0.1, 12)
        pts = np.linspace(-1, 1, 4)[:, None]
        assert np.array_equal(predict(m, sig, times, pts), predict(m, cut, times, pts))

    def test_domain(self):
        with pytest.raises(DomainError):
            predict(make_model(), InputSignal.constant([0, 0], 1.0), [1.5], np.zeros((1, 1)))


def fd_grad(model, samples, spec, h=1e-6):
    from ldnets.model import batch_loss

    batch = prepare_batch(model, samples)
    th = model.params.copy()
    g = np.empty_like(th)
    for k in range(th.size):
        tp, tm = th.copy(), th.copy()
        tp[k] += h
        tm[k] -= h
        g[k] = (batch_loss(model, tp, batch, spec) - batch_loss(model, tm, batch, spec)) / (2 * h)
    return g


def rel_err(a, b):
    # norm-wise, so entries near zero do not amplify finite-difference noise
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestBPTT:
    def test_zero_model_exact_targets(self):
        m = make_model()
        m = m.with_params(np.zeros_like(m.params))
        smp = random_samples(m, 2, 3, 4, 1.0, 0)
        for s in smp:
            s.outputs[:] = m.out_norm.center
        loss, gd, gr = bptt_gradient(m, smp, LossSpec(y_norm=1.0))
        assert loss == 0.0 and not gd.any() and not gr.any()

    def test_small_model_vs_fd(self):
        m = randomize(make_model(d_s=2, dyn=(5,), rec=(6,), dt=0.1), 12)
        smp = random_samples(m, 3, 4, 3, 1.0, 1)
        spec = LossSpec(y_norm=1.3, alpha_dyn=1e-3, alpha_rec=2e-3)
        loss, gd, gr = bptt_gradient(m, smp, spec)
        assert rel_err(np.concatenate([gd, gr]), fd_grad(m, smp, spec)) <= 1e-5

    def test_regularization_only(self):
        m = randomize(make_model(), 13)
        smp = random_samples(m, 2, 2, 2, 0.5, 2)
        _, gd0, gr0 = bptt_gradient(m, smp, LossSpec(y_norm=1.0))
        _, gd, gr = bptt_gradient(m, smp, LossSpec(y_norm=1.0, alpha_dyn=0.3, alpha_rec=0.7))
        th_d, th_r = m.dyn_net.params, m.rec_net.params
        assert np.allclose(gd - gd0, 0.3 * 2 * th_d / th_d.size, rtol=1e-12, atol=1e-15)
        assert np.allclose(gr - gr0, 0.7 * 2 * th_r / th_r.size, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("kw", [{"u_eq": [0.1, 0.2]}, {"rec_uses_input": True}])
    def test_variants_vs_fd(self, kw):
        m = randomize(make_model(**kw), 14)
        smp = random_samples(m, 2, 3, 2, 0.8, 3)
        spec = LossSpec(y_norm=0.9)
        _, gd, gr = bptt_gradient(m, smp, spec)
        assert rel_err(np.concatenate([gd, gr]), fd_grad(m, smp, spec)) <= 1e-5

    def test_goal_oriented_vs_fd(self):
        m = randomize(make_model(d=2, d_y=2), 15)
        smp = random_samples(m, 2, 3, 3, 0.6, 4)
        spec = LossSpec(metric="goal_oriented", v_norm=1.7, gamma=0.1, eps=1e-4)
        _, gd, gr = bptt_gradient(m, smp, spec)
        assert rel_err(np.concatenate([gd, gr]), fd_grad(m, smp, spec)) <= 1e-5

    def test_dirichlet_vs_fd(self):
        d = Dirichlet(lambda X: X[:, :1] ** 2, lambda X: 1 - X[:, 0] ** 2)
        m = randomize(make_model(dirichlet=d), 16)
        smp = random_samples(m, 2, 2, 3, 0.5, 5)
        spec = LossSpec(y_norm=1.0)
        _, gd, gr = bptt_gradient(m, smp, spec)
        assert rel_err(np.concatenate([gd, gr]), fd_grad(m, smp, spec)) <= 1e-5


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = randomize(make_model(u_eq=[0.1, 0.0], rec_uses_input=True), 17)
        m.save(tmp_path / "ck", extra={"y_norm": 2.0})
        again, meta = LDNet.load(tmp_path / "ck")
        assert again.params.tobytes() == m.params.tobytes()
        assert meta["y_norm"] == 2.0 and again.rec_uses_input and np.array_equal(again.u_eq, m.u_eq)
        sig = InputSignal.constant([0.3, 0.1], 1.0)
        pts = np.zeros((1, 1))
        assert np.array_equal(predict(m, sig, [1.0], pts), predict(again, sig, [1.0], pts))

    def test_param_file_order(self, tmp_path):
        m = randomize(make_model(), 18)
        m.save(tmp_path / "ck")
        raw = np.fromfile(tmp_path / "ck.bin", dtype="<f8")
        assert np.array_equal(raw[: m.n_dyn], m.dyn_net.params)
        assert np.array_equal(raw[m.n_dyn :], m.rec_net.params)
