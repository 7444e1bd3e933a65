"""Dataset assembly for the synthetic test cases and the on-disk format.

A dataset directory holds ``manifest.json`` plus, per sample ``i``,

* ``u_<i>.bin``: input values at the input times, shape ``(n_u, d_u)``
* ``x_<i>.bin``: observation points, ``(n_p, d)`` or ``(n_t, n_p, d)``
* ``y_<i>.bin``: outputs, ``(n_t, n_p, d_y)``

all little-endian float64, row-major.  The manifest records shapes, input
and observation times, normalization constants, ``y_norm`` and every
generator constant, so a directory is self-describing.  Externally produced
data (e.g. flow simulations) can be ingested by writing the same layout.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import _random
from ..errors import InvalidDatasetError, InvalidSpecError, SolverError
from ..fcnn import NormalizationSpec, make_normalization
from ..model import InputSignal
from .adr import ADRConfig, solve_adr, sine_forcing
from .aliev_panfilov import APConfig, Stimulus, make_stimulus, solve_aliev_panfilov
from .gp import GPConfig, sample_bounded_frequency, sample_gp

__all__ = [
    "Sample",
    "Dataset",
    "CASES",
    "default_case_params",
    "build_dataset",
    "write_dataset",
    "read_dataset",
    "thin_points",
    "compute_y_norm",
]

FORMAT = "ldnets-dataset"
FORMAT_VERSION = 1

CASES = ("tc1a", "tc1b", "tc1c", "tc3", "external")

TC1A_BOUNDS = ((0.0, 0.05), (-0.1, 0.1), (0.0, 0.01))
TC1B_MU = (0.05, 0.0, 0.002)


@dataclass
class Sample:
    input: InputSignal
    times: np.ndarray  # (n_t,)
    points: np.ndarray  # (n_p, d) shared, or (n_t, n_p, d)
    outputs: np.ndarray  # (n_t, n_p, d_y)
    params: dict = field(default_factory=dict)

    @property
    def shared_points(self) -> bool:
        return np.ndim(self.points) == 2


@dataclass
class Dataset:
    case: str
    samples: list
    d_u: int
    d_y: int
    d: int
    y_norm: float
    normalization: dict  # "u", "x", "y" -> NormalizationSpec
    generator: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def t_final(self) -> float:
        return max(float(s.input.t_final) for s in self.samples)

    def subset(self, indices) -> "Dataset":
        return replace(self, samples=[self.samples[i] for i in indices])

    def on_fixed_grid(self) -> bool:
        """True when every sample observes the same points at every time."""
        ref = self.samples[0]
        if not ref.shared_points:
            return False
        return all(
            s.shared_points and np.array_equal(s.points, ref.points) for s in self.samples
        )


def compute_y_norm(samples) -> float:
    """Range (max - min) of all outputs; the field-wide scale used by the loss."""
    lo = min(float(np.min(s.outputs)) for s in samples)
    hi = max(float(np.max(s.outputs)) for s in samples)
    return hi - lo


def default_case_params(case: str) -> dict:
    """Every generator constant for a case, explicitly."""
    if case in ("tc1a", "tc1b", "tc1c"):
        p = {"T": 10.0, "nx": 101, "n_obs_times": 100, "substeps": 16, "n_input_times": 101}
        if case == "tc1a":
            p["bounds"] = [list(b) for b in TC1A_BOUNDS]
        else:
            p["mu"] = list(TC1B_MU)
            p["P"] = {"mean": 0.0, "std": 4.0 / 3.0, "timescale": 1.0}
            if case == "tc1b":
                p["A"] = {"mean": 2.0 / 5.0, "std": 2.0 / 15.0, "timescale": 1.0}
                p["F"] = 0.5
            else:
                p["A"] = {"mean": 1.0, "std": 1.0 / 3.0, "timescale": 1.0}
                p["F"] = {"fmin": 0.25, "fmax": 0.5, "timescale": 1.0}
        return p
    if case == "tc3":
        ap = APConfig()
        return {
            "model": {
                "D": ap.D, "K": ap.K, "alpha": ap.alpha, "gamma": ap.gamma,
                "mu1": ap.mu1, "mu2": ap.mu2, "b": ap.b, "L": ap.L, "T": ap.T,
            },
            "nx": ap.nx,
            "nt": ap.nt,
            "n_obs_points": ap.n_obs_points,
            "n_obs_times": ap.n_obs_times,
            "nodes_per_site": ap.nodes_per_site,
            "stimulus": {
                "amplitude": 1.0,
                "duration": 2.0,
                "min_separation": 30.0,
                "onset_step": 0.5,
                "max_events": 4,
            },
            "input_step": 0.5,
        }
    if case == "external":
        return {}
    raise InvalidSpecError(f"unknown case {case!r}; expected one of {CASES}")


def _merge(base: dict, override: Optional[dict]) -> dict:
    out = dict(base)
    for k, v in (override or {}).items():
        if k not in base:
            raise InvalidSpecError(f"unknown case parameter {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v)
        else:
            out[k] = v
    return out


# -- per-case generators -----------------------------------------------------


def _adr_sample(case, p, seed, index):
    T = float(p["T"])
    grid = np.linspace(0.0, T, int(p["n_input_times"]))
    common = dict(nx=int(p["nx"]), T=T, n_obs_times=int(p["n_obs_times"]), substeps=int(p["substeps"]))
    params = {}
    if case == "tc1a":
        rng = _random.stream(seed, "parameters", index)
        mu = [float(rng.uniform(lo, hi)) for lo, hi in p["bounds"]]
        cfg = ADRConfig(*mu, z0=lambda x: np.cos(np.pi * x), **common)
        signal = InputSignal.constant(mu, T)
        params["mu"] = mu
    else:
        A = sample_gp(GPConfig(p["A"]["mean"], p["A"]["std"], p["A"]["timescale"], tuple(grid), seed, index, "amplitude"))
        P = sample_gp(GPConfig(p["P"]["mean"], p["P"]["std"], p["P"]["timescale"], tuple(grid), seed, index, "phase"))
        if case == "tc1b":
            F = float(p["F"])
            values = np.column_stack([A.values[:, 0], P.values[:, 0]])
        else:
            f = p["F"]
            F = sample_bounded_frequency(f["fmin"], f["fmax"], f["timescale"], grid, seed, index)
            values = np.column_stack([A.values[:, 0], F.values[:, 0], P.values[:, 0]])
        cfg = ADRConfig(*p["mu"], forcing=sine_forcing(A, F, P), **common)
        signal = InputSignal(grid, values, t_final=T)
    sol = solve_adr(cfg)
    return Sample(signal, sol.times, sol.x[:, None], sol.z[:, :, None], params)


def ap_config_from(p) -> APConfig:
    m = p["model"]
    return APConfig(
        D=m["D"], K=m["K"], alpha=m["alpha"], gamma=m["gamma"], mu1=m["mu1"], mu2=m["mu2"],
        b=m["b"], L=m["L"], T=m["T"], nx=int(p["nx"]), nt=int(p["nt"]),
        n_obs_points=int(p["n_obs_points"]), n_obs_times=int(p["n_obs_times"]),
        nodes_per_site=int(p["nodes_per_site"]),
    )


def ap_input_grid(p) -> np.ndarray:
    T = float(p["model"]["T"])
    n = int(round(T / p["input_step"]))
    return np.linspace(0.0, T, n + 1)


def _ap_sample(p, seed, index):
    cfg = ap_config_from(p)
    s = p["stimulus"]
    stim = make_stimulus(
        seed, index, T=cfg.T, max_events=int(s["max_events"]), amplitude=s["amplitude"],
        duration=s["duration"], min_separation=s["min_separation"], onset_step=s["onset_step"],
    )
    sol = solve_aliev_panfilov(cfg, stim)
    signal = stim.as_signal(ap_input_grid(p), t_final=cfg.T)
    return Sample(signal, sol.times, sol.x[:, None], sol.z[:, :, None], {"pulses": stim.to_list()})


def _generate_one(args):
    case, p, seed, index = args
    if case == "tc3":
        return _ap_sample(p, seed, index)
    return _adr_sample(case, p, seed, index)


def _input_normalization(case, p) -> NormalizationSpec:
    if case == "tc1a":
        lo, hi = zip(*p["bounds"])
        return make_normalization("bounded", lo, hi)
    if case in ("tc1b", "tc1c"):
        specs = [make_normalization("sampled", p["A"]["mean"], p["A"]["std"])]
        if case == "tc1c":
            specs.append(make_normalization("bounded", p["F"]["fmin"], p["F"]["fmax"]))
        specs.append(make_normalization("sampled", p["P"]["mean"], p["P"]["std"]))
        return NormalizationSpec(
            [s.center[0] for s in specs], [s.half_width[0] for s in specs]
        )
    amp = p["stimulus"]["amplitude"]
    return make_normalization("bounded", [0.0, 0.0], [amp, amp])


def _point_normalization(case, p) -> NormalizationSpec:
    if case == "tc3":
        return make_normalization("bounded", 0.0, p["model"]["L"])
    return make_normalization("bounded", -1.0, 1.0)


def output_normalization(samples) -> NormalizationSpec:
    lo = np.min([np.min(s.outputs.reshape(-1, s.outputs.shape[-1]), axis=0) for s in samples], axis=0)
    hi = np.max([np.max(s.outputs.reshape(-1, s.outputs.shape[-1]), axis=0) for s in samples], axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    return make_normalization("bounded", lo, hi)


def build_dataset(
    case: str,
    n_samples: int,
    seed: int,
    params: Optional[dict] = None,
    *,
    first_index: int = 0,
    out: Optional[str] = None,
    jobs: int = 1,
    source: Optional[str] = None,
) -> Dataset:
    """Generate (or ingest) a dataset and optionally write it to ``out``.

    Sample ``j`` of the result uses the random streams of index
    ``first_index + j``, so a test set is simply a second call with a
    ``first_index`` past the training range.  ``case="external"`` reads the
    directory ``source`` instead of generating.
    """
    if case == "external":
        if source is None:
            raise InvalidSpecError("external case needs a source directory")
        ds = read_dataset(source)
        if out is not None:
            write_dataset(ds, out)
        return ds
    p = _merge(default_case_params(case), params)
    if n_samples < 1:
        raise InvalidSpecError("n_samples must be at least 1")
    tasks = [(case, p, seed, first_index + j) for j in range(n_samples)]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                samples = list(pool.map(_generate_one, tasks))
        else:
            samples = [_generate_one(t) for t in tasks]
    except FloatingPointError as exc:  # pragma: no cover - defensive
        raise SolverError(str(exc)) from exc
    s0 = samples[0]
    ds = Dataset(
        case=case,
        samples=samples,
        d_u=s0.input.d_u,
        d_y=s0.outputs.shape[-1],
        d=s0.points.shape[-1],
        y_norm=compute_y_norm(samples),
        normalization={
            "u": _input_normalization(case, p),
            "x": _point_normalization(case, p),
            "y": output_normalization(samples),
        },
        generator={"case_params": p, "seed": seed, "first_index": first_index, "y_norm_rule": "max-min"},
    )
    if out is not None:
        write_dataset(ds, out)
    return ds


def thin_points(dataset: Dataset, n_points: int, seed: int) -> Dataset:
    """Keep ``n_points`` random points per time, drawn independently per time."""
    new = []
    for i, s in enumerate(dataset.samples):
        n_t = s.times.size
        P = np.broadcast_to(s.points, (n_t,) + s.points.shape[-2:]) if s.shared_points else s.points
        if n_points > P.shape[1]:
            raise InvalidSpecError(f"cannot keep {n_points} of {P.shape[1]} points")
        rng = _random.stream(seed, "thinning", i)
        idx = np.stack([np.sort(rng.choice(P.shape[1], n_points, replace=False)) for _ in range(n_t)])
        rows = np.arange(n_t)[:, None]
        new.append(replace(s, points=P[rows, idx].copy(), outputs=s.outputs[rows, idx].copy()))
    gen = dict(dataset.generator, thinning={"n_points": n_points, "seed": seed})
    return replace(dataset, samples=new, generator=gen)


# -- persistence -----------------------------------------------------------------


def _write_array(path: Path, a):
    np.ascontiguousarray(a, dtype="<f8").tofile(path)


def write_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(ds.samples):
        _write_array(out / f"u_{i}.bin", s.input.values)
        _write_array(out / f"x_{i}.bin", s.points)
        _write_array(out / f"y_{i}.bin", s.outputs)
        entries.append(
            {
                "input_times": s.input.times.tolist(),
                "t_final": float(s.input.t_final),
                "u_shape": list(s.input.values.shape),
                "obs_times": np.asarray(s.times).tolist(),
                "x_shape": list(np.shape(s.points)),
                "y_shape": list(np.shape(s.outputs)),
                "params": s.params,
            }
        )
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "case": ds.case,
        "n_samples": len(ds.samples),
        "d_u": ds.d_u,
        "d_y": ds.d_y,
        "d": ds.d,
        "y_norm": ds.y_norm,
        "normalization": {k: v.to_dict() for k, v in ds.normalization.items()},
        "generator": ds.generator,
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def _read_array(path: Path, shape):
    if not path.is_file():
        raise InvalidDatasetError(f"missing data file {path.name}")
    a = np.fromfile(path, dtype="<f8")
    if a.size != math.prod(shape):
        raise InvalidDatasetError(f"{path.name}: {a.size} values, manifest declares shape {shape}")
    return a.reshape(shape)


def read_dataset(path) -> Dataset:
    """Read and validate a dataset directory."""
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise InvalidDatasetError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidDatasetError(f"manifest.json is not valid JSON: {exc}") from exc
    required = ("case", "n_samples", "d_u", "d_y", "d", "y_norm", "normalization", "samples")
    missing = [k for k in required if k not in m]
    if missing:
        raise InvalidDatasetError(f"manifest lacks {missing}")
    if m.get("format", FORMAT) != FORMAT:
        raise InvalidDatasetError(f"unknown format {m['format']!r}")
    if len(m["samples"]) != m["n_samples"] or m["n_samples"] < 1:
        raise InvalidDatasetError("n_samples does not match the sample list")
    if not m["y_norm"] > 0:
        raise InvalidDatasetError("y_norm must be positive")
    samples = []
    for i, e in enumerate(m["samples"]):
        try:
            u = _read_array(path / f"u_{i}.bin", e["u_shape"])
            x = _read_array(path / f"x_{i}.bin", e["x_shape"])
            y = _read_array(path / f"y_{i}.bin", e["y_shape"])
            signal = InputSignal(e["input_times"], u, t_final=e.get("t_final"))
            times = np.asarray(e["obs_times"], dtype=np.float64)
        except (KeyError, ValueError) as exc:
            raise InvalidDatasetError(f"sample {i}: {exc}") from exc
        n_t = times.size
        if u.shape[1] != m["d_u"] or x.shape[-1] != m["d"] or y.shape[-1] != m["d_y"]:
            raise InvalidDatasetError(f"sample {i}: array dims disagree with d_u/d/d_y")
        n_p = x.shape[-2]
        if y.shape != (n_t, n_p, m["d_y"]) or (x.ndim == 3 and x.shape[0] != n_t) or x.ndim not in (2, 3):
            raise InvalidDatasetError(f"sample {i}: outputs {y.shape} do not match {n_t} times x {n_p} points")
        samples.append(Sample(signal, times, x, y, e.get("params", {})))
    try:
        norm = {k: NormalizationSpec.from_dict(v) for k, v in m["normalization"].items()}
    except (KeyError, ValueError) as exc:
        raise InvalidDatasetError(f"bad normalization block: {exc}") from exc
    for key in ("u", "x", "y"):
        if key not in norm:
            raise InvalidDatasetError(f"normalization for {key!r} missing")
    return Dataset(m["case"], samples, m["d_u"], m["d_y"], m["d"], float(m["y_norm"]), norm, m.get("generator", {}))
