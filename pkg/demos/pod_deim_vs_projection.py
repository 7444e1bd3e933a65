"""Compare POD-DEIM with the best linear approximation on the cable model.

Uses a coarse cable (201 nodes, 200 time units) so it finishes in under a
minute.  For each basis size it prints the error of the orthogonal
projection of the test snapshots onto the POD basis (the floor any linear
reduced model can reach) and the error of the POD-DEIM simulation, which
may diverge.

    python demos/pod_deim_vs_projection.py
"""

import numpy as np

from ldnets.baselines.pod_deim import build_pod_deim, compute_pod, pod_deim_simulate
from ldnets.errors import DivergenceError
from ldnets.fom.aliev_panfilov import APConfig, make_stimulus, solve_aliev_panfilov
from ldnets.metrics import nrmse


def run(cfg, stimuli):
    sols = [solve_aliev_panfilov(cfg, s, full=True) for s in stimuli]
    Q = np.hstack([np.hstack([s.full_z, s.full_w]).T for s in sols])
    F = np.hstack([s.full_fnl.T for s in sols])
    return sols, Q, F


def main():
    cfg = APConfig(L=25.0, T=200.0, nx=201, nt=40_000, n_obs_points=50, n_obs_times=200)
    train_stim = [make_stimulus(3, i, T=cfg.T, max_events=2) for i in range(8)]
    test_stim = [make_stimulus(3, 100 + i, T=cfg.T, max_events=2) for i in range(3)]
    train, Q, F = run(cfg, train_stim)
    test, Qte, _ = run(cfg, test_stim)
    refs = [s.z for s in test]
    y_norm = max(s.z.max() for s in train) - min(s.z.min() for s in train)

    print(" d_s  projection  POD-DEIM")
    for d_s in (4, 8, 16, 32):
        V = compute_pod(Q, d_s).V
        proj = [(V @ (V.T @ np.hstack([s.full_z, s.full_w]).T))[cfg.obs_nodes].T for s in test]
        try:
            res = pod_deim_simulate(build_pod_deim(cfg, Q, F, d_s), test_stim)
            rom = f"{nrmse(list(res.z), refs, y_norm):.4f}"
        except DivergenceError as err:
            rom = f"diverged (step {err.step})"
        print(f"{d_s:4d}  {nrmse(proj, refs, y_norm):10.4f}  {rom}")


if __name__ == "__main__":
    main()
