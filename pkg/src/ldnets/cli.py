"""Command-line driver: ``gen-data``, ``train``, ``eval``, ``baseline``, ``report``.

Each command takes ``--config FILE`` (a JSON tree; either the command's own
section or a recipe holding several sections), explicit flags, and
``--set key.path=value`` overrides.  Exit codes: 0 success, 2 invalid
configuration, 3 solver failure, 4 divergence during training, 5
checkpoint/dataset dimension mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .errors import (
    ConfigError,
    DivergenceError,
    InvalidDatasetError,
    InvalidSpecError,
    LDNetError,
    ShapeError,
    SolverError,
    UnsupportedDatasetError,
)

__all__ = ["main", "run_gen_data", "run_train", "run_eval", "run_baseline", "run_report"]

log = logging.getLogger("ldnets")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGENCE, EXIT_MISMATCH = 0, 2, 3, 4, 5


class MismatchError(LDNetError):
    pass


# -- gen-data ----------------------------------------------------------------------


def run_gen_data(cfg: dict, only_split=None):
    from .fom.dataset import build_dataset, thin_points, write_dataset

    h = C.config_hash(cfg)
    summaries = {}
    for name, sp in cfg["splits"].items():
        if only_split is not None and name != only_split:
            continue
        ds = build_dataset(
            cfg["case"], sp["n_samples"], cfg["seed"], cfg["params"], first_index=sp["first_index"], jobs=cfg["jobs"]
        )
        if cfg["thin_points"]:
            ds = thin_points(ds, cfg["thin_points"], cfg["thin_seed"] + sp["first_index"])
        ds.generator["config_hash"] = h
        ds.generator["split"] = name
        write_dataset(ds, sp["out"])
        summaries[name] = {"n_samples": len(ds), "d_u": ds.d_u, "d_y": ds.d_y, "d": ds.d, "y_norm": ds.y_norm}
        print(
            f"{name}: {len(ds)} samples, d_u={ds.d_u} d_y={ds.d_y} d={ds.d}, "
            f"y_norm={ds.y_norm:.6g} -> {sp['out']}"
        )
    return summaries


# -- train -----------------------------------------------------------------------------


def _write_history(path, history, h):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", "loss", "config_hash"])
        for epoch, stage, loss in history:
            w.writerow([epoch, stage, repr(float(loss)), h])


def build_model(cfg_model, ds):
    from .model import LDNet

    m = cfg_model
    return LDNet.create(
        m["n_latent"],
        m["dyn_hidden"],
        m["rec_hidden"],
        dt=m["dt"],
        dt_ref=m["dt_ref"],
        u_norm=ds.normalization["u"],
        x_norm=ds.normalization["x"],
        out_norm=ds.normalization["y"],
        seed=m["init_seed"],
        rec_uses_input=m["rec_uses_input"],
        u_eq=m["u_eq"],
    )


def run_train(cfg: dict):
    from .fom.dataset import read_dataset
    from .losses import LossSpec
    from .model import LDNet
    from .training import TrainingSchedule, train_two_stage

    h = C.config_hash(cfg)
    ds = read_dataset(cfg["dataset"])
    samples = ds.samples[: cfg["max_samples"]] if cfg["max_samples"] else ds.samples
    if cfg["resume"]:
        model, _ = LDNet.load(cfg["resume"])
    else:
        model = build_model(cfg["model"], ds)
    if (model.d_u, model.d, model.d_y) != (ds.d_u, ds.d, ds.d_y):
        raise MismatchError(
            f"model dims (d_u, d, d_y)={(model.d_u, model.d, model.d_y)} vs dataset {(ds.d_u, ds.d, ds.d_y)}"
        )
    lo = dict(cfg["loss"])
    y_norm = lo.pop("y_norm") or ds.y_norm
    spec = LossSpec(y_norm=y_norm, **lo)
    schedule = TrainingSchedule(**cfg["schedule"])

    def progress(epoch, stage, loss):
        log.info("epoch %d (%s): loss %.6e", epoch, stage, loss)

    model, history = train_two_stage(model, samples, spec, schedule, progress)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "checkpoint", extra={"config_hash": h, "y_norm": y_norm})
    _write_history(out / "loss_history.csv", history, h)
    C.dump_config(cfg, out / "resolved_config.json")
    final = history[-1][2] if history else float("nan")
    print(f"trained {len(history)} epochs, final loss {final:.6e} -> {out}")
    return model, history


# -- eval ------------------------------------------------------------------------------


def _heatmap(path, x, t, ref, pred):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), constrained_layout=True)
    lo, hi = float(min(ref.min(), pred.min())), float(max(ref.max(), pred.max()))
    extent = [float(x.min()), float(x.max()), float(t.min()), float(t.max())]
    for ax, field, title in zip(axes, (ref, pred, pred - ref), ("reference", "prediction", "error")):
        kw = {"vmin": lo, "vmax": hi} if title != "error" else {"cmap": "RdBu_r"}
        im = ax.imshow(field, origin="lower", aspect="auto", extent=extent, **kw)
        ax.set_title(title)
        ax.set_xlabel("x")
        fig.colorbar(im, ax=ax)
    axes[0].set_ylabel("t")
    fig.savefig(path, dpi=90)
    plt.close(fig)


def run_eval(cfg: dict):
    from .fom.dataset import read_dataset
    from .metrics import evaluate, write_metrics_csv
    from .model import LDNet, batch_predictions, prepare_batch

    ds = read_dataset(cfg["dataset"])
    model, meta = LDNet.load(cfg["checkpoint"])
    if (model.d_u, model.d, model.d_y) != (ds.d_u, ds.d, ds.d_y):
        raise MismatchError(
            f"checkpoint dims (d_u, d, d_y)={(model.d_u, model.d, model.d_y)} vs dataset {(ds.d_u, ds.d, ds.d_y)}"
        )
    y_norm = float(meta.get("y_norm") or ds.y_norm)
    batch = prepare_batch(model, ds.samples)
    preds = batch_predictions(model, batch)
    refs = [s.outputs for s in ds.samples]
    times = [s.times for s in ds.samples]
    h = C.config_hash(cfg)
    run_id = cfg["run_id"] or Path(cfg["checkpoint"]).parent.name or "ldnet"
    rows = []
    for win in cfg["windows"]:
        rep = evaluate(preds, refs, times, y_norm, None if win is None else tuple(win))
        for metric, value in (("nrmse", rep.nrmse), ("pearson_dissimilarity", rep.pearson_dissimilarity)):
            rows.append(
                {"run_id": run_id, "split": cfg["split"], "metric": metric, "value": value,
                 "time_window": rep.window_tag, "config_hash": h}
            )
        print(f"{cfg['split']} [{rep.window_tag}] NRMSE={rep.nrmse:.4e} 1-rho={rep.pearson_dissimilarity:.4e} "
              f"({rep.n_samples} samples, {rep.n_points} observations)")
    if cfg["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(cfg["out"], rows)
    if cfg["dump_fields"]:
        d = Path(cfg["dump_fields"])
        d.mkdir(parents=True, exist_ok=True)
        for i, (p, s) in enumerate(zip(preds, ds.samples)):
            P = np.broadcast_to(s.points, s.outputs.shape[:2] + (ds.d,)) if s.shared_points else s.points
            with open(d / f"fields_{i}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", *[f"x{j}" for j in range(ds.d)], *[f"y{j}" for j in range(ds.d_y)],
                            *[f"pred{j}" for j in range(ds.d_y)]])
                for a in range(p.shape[0]):
                    for b in range(p.shape[1]):
                        w.writerow([repr(float(s.times[a])), *map(repr, P[a, b].tolist()),
                                    *map(repr, s.outputs[a, b].tolist()), *map(repr, p[a, b].tolist())])
    if cfg["heatmaps"]:
        d = Path(cfg["heatmaps"])
        d.mkdir(parents=True, exist_ok=True)
        for i, (p, s) in enumerate(zip(preds[: cfg["max_heatmaps"]], ds.samples)):
            if s.shared_points and ds.d == 1 and ds.d_y == 1:
                _heatmap(d / f"sample_{i}.png", s.points[:, 0], s.times, s.outputs[..., 0], p[..., 0])
    return rows


# -- baselines ---------------------------------------------------------------------


def _pod_deim_row(args):
    from .baselines.pod_deim import build_pod_deim, pod_deim_simulate
    from .metrics import nrmse

    ap, Zs, Fs, d_s, m, test_sets = args
    model = build_pod_deim(ap, Zs, Fs, d_s, m)
    out = {}
    for split, (stimuli, refs, y_norm) in test_sets.items():
        try:
            res = pod_deim_simulate(model, stimuli)
            out[split] = nrmse(list(res.z), refs, y_norm)
        except DivergenceError:
            out[split] = float("inf")
    return d_s, out


def full_snapshots(ds):
    """Re-run the cable model for every sample; returns state and nonlinear-term snapshots."""
    from .fom.aliev_panfilov import Stimulus, solve_aliev_panfilov
    from .fom.dataset import ap_config_from

    if ds.case != "tc3":
        raise UnsupportedDatasetError("POD-DEIM needs a generated tc3 dataset")
    p = ds.generator["case_params"]
    ap = ap_config_from(p)
    Z, F, stimuli = [], [], []
    for s in ds.samples:
        stim = Stimulus.from_list(s.params["pulses"])
        sol = solve_aliev_panfilov(ap, stim, full=True)
        Z.append(np.hstack([sol.full_z, sol.full_w]).T)
        F.append(sol.full_fnl.T)
        stimuli.append(stim)
    return ap, np.hstack(Z), np.hstack(F), stimuli


def run_baseline(cfg: dict):
    from .fom.aliev_panfilov import Stimulus
    from .fom.dataset import read_dataset
    from .metrics import write_metrics_csv

    h = C.config_hash(cfg)
    train = read_dataset(cfg["train_dataset"])
    test = read_dataset(cfg["test_dataset"])
    rows = []
    if cfg["method"] == "pod-deim":
        ap, Zs, Fs, train_stimuli = full_snapshots(train)
        y_norm = train.y_norm
        sets = {
            "train": (train_stimuli, [s.outputs[..., 0] for s in train.samples], y_norm),
            "test": ([Stimulus.from_list(s.params["pulses"]) for s in test.samples],
                     [s.outputs[..., 0] for s in test.samples], y_norm),
        }
        pd = cfg["pod_deim"]
        m_list = pd["m_list"] or pd["ds_list"]
        tasks = [(ap, Zs, Fs, d, m, sets) for d, m in zip(pd["ds_list"], m_list)]
        if cfg["jobs"] > 1:
            with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
                results = list(pool.map(_pod_deim_row, tasks))
        else:
            results = [_pod_deim_row(t) for t in tasks]
        for d_s, out in results:
            run_id = f"{cfg['run_id'] or 'pod-deim'}-{d_s}"
            for split in ("train", "test"):
                rows.append({"run_id": run_id, "split": split, "metric": "nrmse", "value": out[split],
                             "time_window": "all", "config_hash": h})
                print(f"POD-DEIM d_s={d_s} {split} NRMSE={out[split]:.4e}")
    else:
        rows = _run_ae_ode(cfg, train, test, h)
    if cfg["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(cfg["out"], rows)
    return rows


def _run_ae_ode(cfg, train, test, h):
    from .baselines.autoencoder import (
        AEODEModel, ae_ode_predict, finetune_e2e, snapshot_data, train_autoencoder, train_latent_ode,
    )
    from .metrics import nrmse
    from .training import TrainingSchedule

    a = cfg["ae_ode"]
    ae, _ = train_autoencoder(
        train, a["d_s"], n_hidden=a["ae_hidden_layers"], width=a["ae_width"],
        alpha_enc=a["alpha_enc"], alpha_dec=a["alpha_dec"], schedule=TrainingSchedule(**a["schedule_ae"]),
    )
    dyn, _ = train_latent_ode(
        ae, train, hidden=a["dyn_hidden"], dt=a["dt"], dt_ref=a["dt_ref"], u_norm=train.normalization["u"],
        alpha_dyn=a["alpha_dyn"], schedule=TrainingSchedule(**a["schedule_dyn"]),
    )
    models = {"ae-ode": AEODEModel(dyn, ae.decoder, ae.y_norm)}
    if a["e2e"]:
        models["ae-ode-e2e"], _ = finetune_e2e(
            models["ae-ode"], train, alpha_dyn=a["alpha_dyn"], alpha_dec=a["alpha_dec"],
            schedule=TrainingSchedule(**a["schedule_e2e"]),
        )
    rows = []
    for name, model in models.items():
        for split, ds in (("train", train), ("test", test)):
            data = snapshot_data(ds)
            pred = ae_ode_predict(model, data.signals, data.times)
            value = nrmse(list(pred), list(data.Y), train.y_norm)
            rows.append({"run_id": f"{cfg['run_id'] or name}" if cfg["run_id"] is None else f"{cfg['run_id']}-{name}",
                         "split": split, "metric": "nrmse", "value": value, "time_window": "all", "config_hash": h})
            print(f"{name} {split} NRMSE={value:.4e}")
    return rows


# -- report ----------------------------------------------------------------------------


def run_report(cfg: dict):
    from .metrics import read_metrics_csv

    rows = []
    for p in cfg["inputs"]:
        rows.extend(read_metrics_csv(p))
    table = {}
    for r in rows:
        table.setdefault(r["run_id"], {})[(r["split"], r["metric"], r["time_window"])] = r["value"]

    def rank(rid):
        # sort on the requested metric over the whole horizon, else its first window
        vals = [v for (s, m, w), v in sorted(table[rid].items(), key=lambda kv: kv[0][2] != "all")
                if s == cfg["split"] and m == cfg["metric"]]
        return (vals[0] if vals else float("inf"), rid)

    cols = sorted({k for v in table.values() for k in v}, key=lambda c: (c[0], c[1], c[2] != "all", c[2]))
    header = ["run_id"] + [f"{s}_{m}" + ("" if w == "all" else f"[{w}]") for s, m, w in cols]
    body = [[rid] + [table[rid].get(c, float("nan")) for c in cols] for rid in sorted(table, key=rank)]
    if cfg["out"]:
        with open(cfg["out"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[r[0]] + [repr(v) for v in r[1:]] for r in body])
    width = max(len(h) for h in header)
    print(*[h.ljust(width) for h in header])
    for r in body:
        print(r[0].ljust(width), *[f"{v:.4e}".ljust(width) for v in r[1:]])
    return [header] + body


# -- argument parsing --------------------------------------------------------------


def _section(tree, name):
    """A recipe may hold several sections; pick ours, else use the tree itself."""
    return tree.get(name, tree) if any(k in tree for k in C.DEFAULTS) else tree


def _parser():
    p = argparse.ArgumentParser(prog="ldnets", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config or recipe")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (value parsed as JSON)")
        sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a dataset"))
    g.add_argument("--case")
    g.add_argument("--n", type=int, help="number of samples (single split 'train')")
    g.add_argument("--seed", type=int)
    g.add_argument("--first-index", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--split", help="generate only this split of the recipe")
    g.add_argument("--jobs", type=int)

    t = common(sub.add_parser("train", help="train an LDNet"))
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--seed", type=int, help="initialization and schedule seed")
    t.add_argument("--adam-epochs", type=int)
    t.add_argument("--bfgs-epochs", type=int)
    t.add_argument("--resume", help="start from this checkpoint instead of a fresh init")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--split")
    e.add_argument("--run-id")
    e.add_argument("--window", action="append", help="time window lo,hi (repeatable)")
    e.add_argument("--out")
    e.add_argument("--heatmaps")
    e.add_argument("--dump-fields")

    b = common(sub.add_parser("baseline", help="run POD-DEIM or AE/ODE baselines"))
    b.add_argument("--method", choices=["pod-deim", "ae-ode"])
    b.add_argument("--train-dataset")
    b.add_argument("--test-dataset")
    b.add_argument("--ds", help="comma-separated POD-DEIM dimensions")
    b.add_argument("--e2e", action="store_true", default=None)
    b.add_argument("--out")
    b.add_argument("--jobs", type=int)

    r = common(sub.add_parser("report", help="merge metrics CSVs into one table"))
    r.add_argument("inputs", nargs="*")
    r.add_argument("--out")
    return p


def _tree_from_args(args) -> dict:
    name = args.command.replace("-", "_")
    tree = _section(C.load_config(args.config), name) if args.config else {}
    tree = C.apply_overrides(tree, args.set)
    if name == "gen_data":
        for k in ("case", "seed", "jobs"):
            if getattr(args, k) is not None:
                tree[k] = getattr(args, k)
        if args.n is not None or args.out is not None:
            if args.n is None or args.out is None:
                raise ConfigError("--n and --out go together")
            tree["splits"] = {"train": {"n_samples": args.n, "first_index": args.first_index, "out": args.out}}
    elif name == "train":
        for k in ("dataset", "out", "resume"):
            if getattr(args, k) is not None:
                tree[k] = getattr(args, k)
        sch = tree.setdefault("schedule", {})
        if args.adam_epochs is not None:
            sch["adam_epochs"] = args.adam_epochs
        if args.bfgs_epochs is not None:
            sch["bfgs_epochs"] = args.bfgs_epochs
        if args.seed is not None:
            sch["seed"] = args.seed
            tree.setdefault("model", {})["init_seed"] = args.seed
    elif name == "eval":
        for k in ("checkpoint", "dataset", "split", "run_id", "out", "heatmaps", "dump_fields"):
            if getattr(args, k) is not None:
                tree[k] = getattr(args, k)
        if args.window:
            wins = []
            for w in args.window:
                if w in ("all", ""):
                    wins.append(None)
                    continue
                try:
                    lo, hi = (float(v) for v in w.split(","))
                except ValueError as exc:
                    raise ConfigError(f"bad window {w!r}; expected lo,hi") from exc
                wins.append([lo, hi])
            tree["windows"] = wins
    elif name == "baseline":
        for k in ("method", "train_dataset", "test_dataset", "out", "jobs"):
            if getattr(args, k) is not None:
                tree[k] = getattr(args, k)
        if args.ds:
            try:
                tree.setdefault("pod_deim", {})["ds_list"] = [int(v) for v in args.ds.split(",")]
            except ValueError as exc:
                raise ConfigError(f"bad --ds {args.ds!r}") from exc
        if args.e2e:
            tree.setdefault("ae_ode", {})["e2e"] = True
    elif name == "report":
        if args.inputs:
            tree["inputs"] = args.inputs
        if args.out is not None:
            tree["out"] = args.out
    return tree


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    name = args.command.replace("-", "_")
    try:
        cfg = C.resolve(name, _tree_from_args(args))
        if args.dry_run:
            print(json.dumps(dict(cfg, config_hash=C.config_hash(cfg)), indent=2, sort_keys=True))
            return EXIT_OK
        runner = {
            "gen_data": lambda c: run_gen_data(c, getattr(args, "split", None)),
            "train": run_train,
            "eval": run_eval,
            "baseline": run_baseline,
            "report": run_report,
        }[name]
        runner(cfg)
    except (ConfigError, InvalidSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DivergenceError as exc:
        where = f" (stage {exc.stage}, step {exc.step})" if exc.stage or exc.step else ""
        print(f"divergence{where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (MismatchError, ShapeError) as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (InvalidDatasetError, UnsupportedDatasetError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
