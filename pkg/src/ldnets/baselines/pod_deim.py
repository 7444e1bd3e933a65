"""POD-Galerkin reduced model with DEIM hyper-reduction for the cable model.

The full state is the stacked vector ``q = [z; w]`` (length ``2 nx``).  The
right-hand side splits into

* ``F_l(q) = [D Lap z; 0]`` (linear: diffusion only), and
* ``F_nl(q, I) = [f_z(z, w) + B I; f_w(z, w)]`` (pointwise reaction terms
  plus the stimulus source).

With a POD basis ``V`` and a DEIM pair ``(U, P)`` the reduced state obeys

    ds/dt = V^T F_l V s + V^T U (P^T U)^-1 P^T F_nl(V s, I)

stepped with forward Euler on the full-order time grid.  Only the rows of
``V s`` at the DEIM nodes are ever formed, so a step costs ``O(d_s m)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DegenerateBasisError, DivergenceError, RankError, ShapeError
from ..fom.aliev_panfilov import APConfig, laplacian_neumann, reaction, source_matrix

__all__ = [
    "PODBasis",
    "DEIMOperator",
    "PODDEIMModel",
    "compute_pod",
    "deim_indices",
    "build_deim",
    "build_pod_deim",
    "pod_deim_simulate",
    "PODDEIMResult",
]


@dataclass(frozen=True, eq=False)
class PODBasis:
    V: np.ndarray  # (N_h, d_s), orthonormal columns
    singular_values: np.ndarray  # all singular values of the snapshot matrix

    @property
    def n_modes(self) -> int:
        return self.V.shape[1]

    def project(self, Z):
        return self.V.T @ Z

    def reconstruct(self, S):
        return self.V @ S


def compute_pod(snapshots, d_s: int) -> PODBasis:
    """Leading ``d_s`` left singular vectors of the ``(N_h, N_snap)`` snapshot matrix."""
    Z = np.asarray(snapshots, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError(f"snapshot matrix must be 2-D, got {Z.shape}")
    if not 1 <= d_s <= min(Z.shape):
        raise RankError(f"d_s={d_s} must lie in [1, {min(Z.shape)}]")
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    V = np.ascontiguousarray(U[:, :d_s])
    V.flags.writeable = False
    s.flags.writeable = False
    return PODBasis(V, s)


def deim_indices(U) -> np.ndarray:
    """Greedy DEIM interpolation indices (max-residual rule)."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] > U.shape[0] or U.shape[1] == 0:
        raise ShapeError(f"basis must be (N, m) with 1 <= m <= N, got {U.shape}")
    scale = np.max(np.abs(U))
    if scale == 0:
        raise DegenerateBasisError("basis is identically zero")
    idx = [int(np.argmax(np.abs(U[:, 0])))]
    for j in range(1, U.shape[1]):
        c = np.linalg.solve(U[idx, :j], U[idx, j])
        r = U[:, j] - U[:, :j] @ c
        k = int(np.argmax(np.abs(r)))
        if abs(r[k]) <= 1e-12 * scale:
            raise DegenerateBasisError(f"basis is rank deficient at column {j}")
        idx.append(k)
    return np.array(idx, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class DEIMOperator:
    U: np.ndarray  # (N_h, m)
    indices: np.ndarray  # (m,)

    def __post_init__(self):
        if len(set(self.indices.tolist())) != self.indices.size:
            raise DegenerateBasisError("DEIM indices must be distinct")
        if self.indices.size != self.U.shape[1]:
            raise ShapeError("need one index per basis column")

    @property
    def PtU(self):
        return self.U[self.indices]

    def coefficients(self, f_at_indices):
        return np.linalg.solve(self.PtU, f_at_indices)

    def approximate(self, f):
        """``U (P^T U)^-1 P^T f`` for a full vector (or columns of a matrix)."""
        f = np.asarray(f, dtype=np.float64)
        return self.U @ self.coefficients(f[self.indices])


def build_deim(nonlinear_snapshots, m: int) -> DEIMOperator:
    basis = compute_pod(nonlinear_snapshots, m)
    return DEIMOperator(basis.V, deim_indices(basis.V))


@dataclass(frozen=True, eq=False)
class PODDEIMModel:
    config: APConfig
    basis: PODBasis
    deim: DEIMOperator


def build_pod_deim(config: APConfig, state_snapshots, nonlinear_snapshots, d_s: int, m: Optional[int] = None):
    """POD basis of the states and DEIM pair of the nonlinear term (``m`` defaults to ``d_s``)."""
    basis = compute_pod(state_snapshots, d_s)
    deim = build_deim(nonlinear_snapshots, d_s if m is None else m)
    if basis.V.shape[0] != 2 * config.nx or deim.U.shape[0] != 2 * config.nx:
        raise ShapeError(f"snapshots must have 2 * nx = {2 * config.nx} rows")
    return PODDEIMModel(config, basis, deim)


@dataclass
class PODDEIMResult:
    times: np.ndarray  # (n_obs_times,)
    states: np.ndarray  # (n_obs_times, d_s, n_runs) reduced states
    z: np.ndarray  # (n_runs, n_obs_times, n_obs_points) reconstructed potential


def pod_deim_simulate(model: PODDEIMModel, stimuli, *, sources=None) -> PODDEIMResult:
    """Run the reduced model for one or more stimulus protocols at once.

    ``stimuli`` is a single protocol or a list; all runs share the reduced
    operators and are stepped together.
    """
    cfg = model.config
    nx, nt, dt = cfg.nx, cfg.nt, cfg.dt
    V = model.basis.V
    d_s = V.shape[1]
    single = not isinstance(stimuli, (list, tuple))
    stimuli = [stimuli] if single else list(stimuli)
    n_runs = len(stimuli)

    B = source_matrix(cfg) if sources is None else np.asarray(sources, dtype=np.float64)
    lap = laplacian_neumann(nx, cfg.dx) * cfg.D
    A_r = V[:nx].T @ (lap @ V[:nx])  # V^T F_l V
    P = model.deim.indices
    M = V.T @ model.deim.U @ np.linalg.inv(model.deim.PtU)  # (d_s, m)
    # each DEIM row needs z and w at its node
    node = np.where(P < nx, P, P - nx)
    is_z = P < nx
    Vz = V[node]  # (m, d_s)
    Vw = V[nx + node]
    Bp = np.where(is_z[:, None], B[node], 0.0)  # stimulus rows at the DEIM entries
    I = np.stack([s.on_steps(nt, dt) for s in stimuli], axis=-1)  # (nt, n_ch, n_runs)

    stride = nt // cfg.n_obs_times
    Vobs = V[cfg.obs_nodes]
    S = np.zeros((d_s, n_runs))  # V^T Z0 with Z0 = 0
    out_s = np.empty((cfg.n_obs_times, d_s, n_runs))
    j = 0
    # overflow is caught by the finiteness check below, so numpy need not warn
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(nt):
            zp = Vz @ S
            wp = Vw @ S
            fz, fw = reaction(cfg, zp, wp)
            f = np.where(is_z[:, None], fz, fw) + Bp @ I[n]
            S = S + dt * (A_r @ S + M @ f)
            if (n + 1) % stride == 0:
                if not np.all(np.isfinite(S)):
                    raise DivergenceError(f"non-finite reduced state at step {n + 1}", step=n + 1)
                out_s[j] = S
                j += 1
    z = np.einsum("pd,tdr->rtp", Vobs, out_s)
    return PODDEIMResult(cfg.obs_times, out_s, z)
