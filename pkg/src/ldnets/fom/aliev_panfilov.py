"""Aliev-Panfilov excitable-tissue model on a 1-D cable

    z_t = D z_xx + K z (1 - z)(z - alpha) - z w + I_stim
    w_t = (gamma + mu1 w / (mu2 + z)) (-w - K z (z - b - 1))

with zero-flux ends and zero initial state.  Space uses second-order central
differences with mirrored ghost nodes, time uses explicit Euler.  The
stimulus enters as a source on the grid nodes nearest to each stimulation
site.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import _random
from ..errors import ProtocolError, SolverError
from ..model import InputSignal

__all__ = [
    "APConfig",
    "Pulse",
    "Stimulus",
    "make_stimulus",
    "APSolution",
    "solve_aliev_panfilov",
    "laplacian_neumann",
    "source_matrix",
    "reaction",
]


@dataclass(frozen=True)
class APConfig:
    D: float = 0.1
    K: float = 8.0
    alpha: float = 0.1
    gamma: float = 0.02
    mu1: float = 0.2
    mu2: float = 0.3
    b: float = 0.15
    L: float = 100.0
    T: float = 500.0
    nx: int = 800
    nt: int = 100_000
    n_obs_points: int = 100
    n_obs_times: int = 500
    sites: tuple = (0.25, 0.75)  # fractions of L
    nodes_per_site: int = 2

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.mu2 > 0:
            raise ValueError("mu2 must be positive")
        if self.nt % self.n_obs_times:
            raise ValueError("nt must be a multiple of n_obs_times")
        if self.nx < 3:
            raise ValueError("need at least 3 grid nodes")

    @property
    def dx(self) -> float:
        return self.L / (self.nx - 1)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.nx)

    @property
    def obs_nodes(self) -> np.ndarray:
        return np.round(np.linspace(0, self.nx - 1, self.n_obs_points)).astype(np.int64)

    @property
    def obs_steps(self) -> np.ndarray:
        stride = self.nt // self.n_obs_times
        return stride * np.arange(1, self.n_obs_times + 1)

    @property
    def obs_times(self) -> np.ndarray:
        return self.obs_steps * self.dt


@dataclass(frozen=True)
class Pulse:
    channel: int
    onset: float
    duration: float
    amplitude: float


@dataclass(frozen=True)
class Stimulus:
    """Square pulses on ``n_channels`` channels; active on ``[onset, onset + duration)``."""

    pulses: tuple = ()
    n_channels: int = 2

    def value(self, t):
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros(t.shape + (self.n_channels,))
        for p in self.pulses:
            on = (t >= p.onset) & (t < p.onset + p.duration)
            out[..., p.channel] += np.where(on, p.amplitude, 0.0)
        return out

    def on_steps(self, nt: int, dt: float) -> np.ndarray:
        """Values at ``n * dt``, ``n = 0..nt-1``, using integer step windows."""
        out = np.zeros((nt, self.n_channels))
        for p in self.pulses:
            n0 = int(round(p.onset / dt))
            n1 = int(round((p.onset + p.duration) / dt))
            out[max(n0, 0) : max(min(n1, nt), 0), p.channel] += p.amplitude
        return out

    def as_signal(self, times, t_final=None) -> InputSignal:
        times = np.asarray(times, dtype=np.float64)
        return InputSignal(times, self.value(times), t_final=t_final)

    def to_list(self):
        return [[p.channel, p.onset, p.duration, p.amplitude] for p in self.pulses]

    @classmethod
    def from_list(cls, rows, n_channels=2):
        return cls(tuple(Pulse(int(c), float(o), float(d), float(a)) for c, o, d, a in rows), n_channels)


def make_stimulus(
    seed: int,
    index: int = 0,
    *,
    T: float = 500.0,
    n_events: Optional[int] = None,
    max_events: int = 4,
    amplitude: float = 1.0,
    duration: float = 2.0,
    min_separation: float = 30.0,
    onset_step: float = 0.5,
    t_last_onset: Optional[float] = None,
) -> Stimulus:
    """Random pacing protocol.

    Draws ``n_events`` stimulation events (uniform in ``1..max_events`` when
    not given).  Each event fires site 1, site 2 or both with equal
    probability; onsets are uniform on a grid of step ``onset_step`` in
    ``[0, t_last_onset]`` and at least ``min_separation`` apart.
    """
    rng = _random.stream(seed, "stimulus", index)
    if n_events is None:
        n_events = int(rng.integers(1, max_events + 1))
    if n_events < 0:
        raise ProtocolError("number of events must be non-negative")
    if n_events == 0:
        return Stimulus()
    t_last = T - duration if t_last_onset is None else t_last_onset
    if t_last < 0 or duration > T:
        raise ProtocolError("pulse windows do not fit in [0, T]")
    # onsets = sorted uniform points in a shrunk interval, spread apart by the
    # separation: gives uniformly distributed feasible configurations
    slack = t_last - (n_events - 1) * min_separation
    if slack < 0:
        raise ProtocolError(
            f"{n_events} events with separation {min_separation} do not fit before t={t_last}"
        )
    base = np.sort(rng.uniform(0.0, slack, size=n_events))
    onsets = base + min_separation * np.arange(n_events)
    onsets = np.floor(onsets / onset_step) * onset_step
    sites = rng.integers(0, 3, size=n_events)
    pulses = []
    for t0, site in zip(onsets, sites):
        for ch in ((0,), (1,), (0, 1))[site]:
            pulses.append(Pulse(ch, float(t0), float(duration), float(amplitude)))
    return Stimulus(tuple(pulses))


def laplacian_neumann(nx: int, dx: float):
    """Tridiagonal Laplacian (CSR) with mirrored ghost nodes for zero flux."""
    import scipy.sparse as sp

    main = -2.0 * np.ones(nx)
    upper = np.ones(nx - 1)
    lower = np.ones(nx - 1)
    upper[0] = 2.0
    lower[-1] = 2.0
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / dx**2


def source_matrix(config: APConfig) -> np.ndarray:
    """``(nx, n_sites)`` map from channel amplitudes to nodal sources."""
    B = np.zeros((config.nx, len(config.sites)))
    x = config.x
    for c, frac in enumerate(config.sites):
        order = np.argsort(np.abs(x - frac * config.L), kind="stable")
        B[order[: config.nodes_per_site], c] = 1.0
    return B


def reaction(config: APConfig, z, w):
    """Pointwise reaction terms ``(f_z, f_w)`` (without stimulus or diffusion)."""
    K = config.K
    fz = K * z * (1.0 - z) * (z - config.alpha) - z * w
    fw = (config.gamma + config.mu1 * w / (config.mu2 + z)) * (-w - K * z * (z - config.b - 1.0))
    return fz, fw


@dataclass
class APSolution:
    times: np.ndarray  # (n_obs_times,)
    x: np.ndarray  # observed node coordinates
    z: np.ndarray  # (n_obs_times, n_obs_points)
    w: np.ndarray
    full_z: Optional[np.ndarray] = None  # (n_obs_times, nx)
    full_w: Optional[np.ndarray] = None
    full_fnl: Optional[np.ndarray] = None  # (n_obs_times, 2 nx) nonlinear term snapshots


def solve_aliev_panfilov(config: APConfig, stimulus, *, sources=None, full: bool = False) -> APSolution:
    """Explicit Euler in time, central differences in space.

    ``stimulus`` is a :class:`Stimulus` (or anything with ``on_steps``);
    ``sources`` overrides the ``(nx, n_channels)`` source footprint.  With
    ``full=True`` the full-resolution states and the nonlinear term
    (reaction + stimulus, stacked ``[z; w]``) are also returned at the
    observation times.
    """
    nx, nt, dt = config.nx, config.nt, config.dt
    B = source_matrix(config) if sources is None else np.asarray(sources, dtype=np.float64)
    I = stimulus.on_steps(nt, dt)
    lap = laplacian_neumann(nx, config.dx) * config.D
    z = np.zeros(nx)
    w = np.zeros(nx)
    stride = nt // config.n_obs_times
    n_obs = config.n_obs_times
    Zf = np.empty((n_obs, nx))
    Wf = np.empty((n_obs, nx))
    Ff = np.empty((n_obs, 2 * nx)) if full else None
    active = np.any(I != 0, axis=1)
    src = np.zeros(nx)
    j = 0
    for n in range(nt):
        fz, fw = reaction(config, z, w)
        if active[n]:
            src = B @ I[n]
            fz = fz + src
        z_new = z + dt * (lap @ z + fz)
        w = w + dt * fw
        z = z_new
        if (n + 1) % stride == 0:
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(w))):
                raise SolverError(f"non-finite state at step {n + 1}; reduce the time step")
            Zf[j] = z
            Wf[j] = w
            if full:
                gz, gw = reaction(config, z, w)
                if n + 1 < nt and active[n + 1]:
                    gz = gz + B @ I[n + 1]
                Ff[j, :nx] = gz
                Ff[j, nx:] = gw
            j += 1
    nodes = config.obs_nodes
    sol = APSolution(config.obs_times, config.x[nodes], Zf[:, nodes], Wf[:, nodes])
    if full:
        sol.full_z, sol.full_w, sol.full_fnl = Zf, Wf, Ff
    return sol
