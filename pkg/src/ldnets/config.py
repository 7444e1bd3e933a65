"""Run configuration: defaults, validation, flag overrides and hashing.

Every command reads one JSON tree.  Validation fills in every default
explicitly, so the resolved tree written next to each artifact is complete,
and its hash tags all outputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .fom.dataset import CASES, default_case_params

__all__ = [
    "DEFAULTS",
    "load_config",
    "resolve",
    "apply_overrides",
    "config_hash",
    "dump_config",
]

_SCHEDULE = {"adam_epochs": 200, "adam_lr0": 1e-2, "bfgs_epochs": 500, "seed": 0, "bfgs_gtol": 1e-12}

DEFAULTS = {
    "gen_data": {
        "case": None,
        "seed": 0,
        "params": {},
        "thin_points": None,
        "thin_seed": 0,
        "jobs": 1,
        "splits": {},  # name -> {"n_samples", "first_index", "out"}
    },
    "train": {
        "dataset": None,
        "out": None,
        "max_samples": None,
        "model": {
            "n_latent": 2,
            "dyn_hidden": [9, 9],
            "rec_hidden": [11, 11],
            "dt": 0.05,
            "dt_ref": 0.5,
            "rec_uses_input": False,
            "u_eq": None,
            "init_seed": 0,
        },
        "loss": {
            "metric": "quadratic",
            "y_norm": None,  # None: take the dataset's max - min
            "v_norm": 1.0,
            "gamma": 0.1,
            "eps": 1e-4,
            "alpha_dyn": 0.0,
            "alpha_rec": 0.0,
        },
        "schedule": dict(_SCHEDULE),
        "resume": None,
    },
    "eval": {
        "checkpoint": None,
        "dataset": None,
        "split": "test",
        "run_id": None,
        "windows": [None],
        "out": None,
        "heatmaps": None,
        "dump_fields": None,
        "max_heatmaps": 4,
    },
    "baseline": {
        "method": "pod-deim",
        "train_dataset": None,
        "test_dataset": None,
        "out": None,
        "run_id": None,
        "jobs": 1,
        "pod_deim": {"ds_list": [12, 24, 36, 48, 60], "m_list": None},
        "ae_ode": {
            "d_s": 12,
            "ae_hidden_layers": 1,
            "ae_width": 75,
            "alpha_enc": 6.89e-3,
            "alpha_dec": 6.89e-3,
            "dyn_hidden": [38, 38, 38, 38],
            "dt": 0.5,
            "dt_ref": 18.0,
            "alpha_dyn": 2.8e-2,
            "schedule_ae": dict(_SCHEDULE),
            "schedule_dyn": dict(_SCHEDULE),
            "e2e": False,
            "schedule_e2e": dict(_SCHEDULE),
        },
    },
    "report": {"inputs": [], "out": None, "metric": "nrmse", "split": "test"},
}


def _fill(defaults, given, where):
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    out = {}
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{k}")
    for k, d in defaults.items():
        v = given.get(k, copy.deepcopy(d))
        if isinstance(d, dict) and d and k not in ("params", "splits"):
            v = _fill(d, v if v is not None else {}, f"{where}.{k}" if where else k)
        out[k] = v
    return out


def _positive(cfg, key, where, allow_none=False, integer=False):
    v = cfg[key]
    if v is None and allow_none:
        return
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0
    if integer:
        ok = ok and float(v).is_integer()
    if not ok:
        raise ConfigError(f"{where}.{key} must be a positive {'integer' if integer else 'number'}, got {v!r}")


def _non_negative_int(cfg, key, where):
    v = cfg[key]
    if not (isinstance(v, int) and not isinstance(v, bool) and v >= 0):
        raise ConfigError(f"{where}.{key} must be a non-negative integer, got {v!r}")


def _check_schedule(s, where):
    _non_negative_int(s, "adam_epochs", where)
    _non_negative_int(s, "bfgs_epochs", where)
    _non_negative_int(s, "seed", where)
    _positive(s, "adam_lr0", where)
    _positive(s, "bfgs_gtol", where)


def _hidden(v, where):
    if not isinstance(v, list) or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in v):
        raise ConfigError(f"{where} must be a list of positive integers, got {v!r}")


def _need(cfg, key, where):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"{where}.{key} is required")


def resolve(command: str, tree: dict) -> dict:
    """Validate one command's tree and fill every default."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = _fill(DEFAULTS[command], tree or {}, command)
    w = command
    if command == "gen_data":
        if cfg["case"] not in CASES or cfg["case"] == "external":
            raise ConfigError(f"gen_data.case must be one of {CASES[:-1]}, got {cfg['case']!r}")
        try:
            base = default_case_params(cfg["case"])
            from .fom.dataset import _merge

            cfg["params"] = _merge(base, cfg["params"])
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        _non_negative_int(cfg, "seed", w)
        _positive(cfg, "jobs", w, integer=True)
        _positive(cfg, "thin_points", w, allow_none=True, integer=True)
        if not cfg["splits"]:
            raise ConfigError("gen_data.splits must name at least one split")
        for name, sp in cfg["splits"].items():
            sp = _fill({"n_samples": None, "first_index": 0, "out": None}, sp, f"{w}.splits.{name}")
            _positive(sp, "n_samples", f"{w}.splits.{name}", integer=True)
            _non_negative_int(sp, "first_index", f"{w}.splits.{name}")
            _need(sp, "out", f"{w}.splits.{name}")
            cfg["splits"][name] = sp
    elif command == "train":
        _need(cfg, "dataset", w)
        _need(cfg, "out", w)
        m = cfg["model"]
        _positive(m, "n_latent", f"{w}.model", integer=True)
        _hidden(m["dyn_hidden"], f"{w}.model.dyn_hidden")
        _hidden(m["rec_hidden"], f"{w}.model.rec_hidden")
        _positive(m, "dt", f"{w}.model")
        _positive(m, "dt_ref", f"{w}.model")
        _non_negative_int(m, "init_seed", f"{w}.model")
        lo = cfg["loss"]
        if lo["metric"] not in ("quadratic", "goal_oriented"):
            raise ConfigError(f"train.loss.metric must be quadratic or goal_oriented, got {lo['metric']!r}")
        _positive(lo, "y_norm", f"{w}.loss", allow_none=True)
        for k in ("alpha_dyn", "alpha_rec", "gamma"):
            if not isinstance(lo[k], (int, float)) or lo[k] < 0:
                raise ConfigError(f"train.loss.{k} must be a non-negative number")
        _positive(cfg, "max_samples", w, allow_none=True, integer=True)
        _check_schedule(cfg["schedule"], f"{w}.schedule")
    elif command == "eval":
        _need(cfg, "checkpoint", w)
        _need(cfg, "dataset", w)
        wins = cfg["windows"]
        if not isinstance(wins, list) or not wins:
            raise ConfigError("eval.windows must be a non-empty list")
        for win in wins:
            if win is not None and not (
                isinstance(win, list) and len(win) == 2 and all(isinstance(v, (int, float)) for v in win) and win[1] > win[0]
            ):
                raise ConfigError(f"eval.windows entries must be null or [lo, hi] with hi > lo, got {win!r}")
    elif command == "baseline":
        if cfg["method"] not in ("pod-deim", "ae-ode"):
            raise ConfigError(f"baseline.method must be pod-deim or ae-ode, got {cfg['method']!r}")
        _need(cfg, "train_dataset", w)
        _need(cfg, "test_dataset", w)
        _positive(cfg, "jobs", w, integer=True)
        _hidden(cfg["pod_deim"]["ds_list"], f"{w}.pod_deim.ds_list")
        if cfg["pod_deim"]["m_list"] is not None:
            _hidden(cfg["pod_deim"]["m_list"], f"{w}.pod_deim.m_list")
            if len(cfg["pod_deim"]["m_list"]) != len(cfg["pod_deim"]["ds_list"]):
                raise ConfigError("baseline.pod_deim.m_list must match ds_list in length")
        a = cfg["ae_ode"]
        _positive(a, "d_s", f"{w}.ae_ode", integer=True)
        _hidden(a["dyn_hidden"], f"{w}.ae_ode.dyn_hidden")
        for key in ("schedule_ae", "schedule_dyn", "schedule_e2e"):
            _check_schedule(a[key], f"{w}.ae_ode.{key}")
    elif command == "report":
        if not cfg["inputs"]:
            raise ConfigError("report.inputs must list at least one CSV")
    return cfg


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree: dict, assignments) -> dict:
    """Apply ``a.b.c=value`` assignments (values parsed as JSON when possible)."""
    tree = copy.deepcopy(tree)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(text)
    return tree


def load_config(path) -> dict:
    try:
        tree = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError("config root must be an object")
    return tree


def canonical(cfg) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]


def dump_config(cfg, path):
    data = dict(cfg, config_hash=config_hash(cfg))
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
