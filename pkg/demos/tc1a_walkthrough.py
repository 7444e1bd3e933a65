"""Train a small LDNet on the constant-parameter ADR case and evaluate it.

Runs in about a minute on one CPU: a reduced dataset and schedule, so the
error is a few percent rather than the full-schedule value.

    python demos/tc1a_walkthrough.py
"""

import numpy as np

from ldnets.fom.dataset import build_dataset
from ldnets.losses import LossSpec
from ldnets.metrics import evaluate
from ldnets.model import LDNet, batch_predictions, integrate_latent, prepare_batch
from ldnets.training import TrainingSchedule, train_two_stage


def main():
    train = build_dataset("tc1a", 20, seed=0)
    test = build_dataset("tc1a", 20, seed=0, first_index=1000)
    print(f"{len(train.samples)} training samples, y_norm={train.y_norm:.4f}")

    norm = train.normalization
    model = LDNet.create(
        2, [9, 9], [11, 11], dt=0.05, dt_ref=0.5,
        u_norm=norm["u"], x_norm=norm["x"], out_norm=norm["y"], seed=0,
    )

    def progress(epoch, stage, loss):
        if epoch % 25 == 0:
            print(f"  epoch {epoch:4d} ({stage}) loss {loss:.3e}")

    model, history = train_two_stage(
        model, train.samples, LossSpec(y_norm=train.y_norm), TrainingSchedule(50, 1e-2, 100), progress
    )

    preds = batch_predictions(model, prepare_batch(model, test.samples))
    refs = [s.outputs for s in test.samples]
    report = evaluate(preds, refs, [s.times for s in test.samples], train.y_norm)
    print(f"test NRMSE {report.nrmse:.3e}, 1-rho {report.pearson_dissimilarity:.3e}")

    # the latent trajectory of one test sample: two states suffice for a
    # decaying, drifting cosine
    s = test.samples[0]
    traj = integrate_latent(model, s.input, float(s.times[-1]))
    print("latent state at t=0, T/2, T:")
    for k in (0, traj.states.shape[0] // 2, -1):
        print("  ", np.array2string(traj.states[k], precision=4))


if __name__ == "__main__":
    main()
