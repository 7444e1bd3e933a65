"""Test-time accuracy metrics and the metrics CSV.

Predictions and references are sequences (one entry per sample) of arrays
shaped ``(n_t, n_p, d_y)``; a 2-D ``(n_t, n_p)`` entry is read as ``d_y = 1``.
Samples may differ in their number of times and points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError, InvalidSpecError, UndefinedCorrelationError

__all__ = [
    "nrmse",
    "pearson_dissimilarity",
    "EvaluationReport",
    "evaluate",
    "time_window_mask",
    "METRICS_COLUMNS",
    "write_metrics_csv",
    "read_metrics_csv",
]

METRICS_COLUMNS = ("run_id", "split", "metric", "value", "time_window", "config_hash")


def _as_fields(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def _aligned(predictions, references):
    if len(predictions) != len(references):
        raise AlignmentError(f"{len(predictions)} predicted samples vs {len(references)} references")
    if len(predictions) == 0:
        raise AlignmentError("no samples")
    pairs = []
    for i, (p, r) in enumerate(zip(predictions, references)):
        p, r = _as_fields(p), _as_fields(r)
        if p.shape != r.shape or p.ndim != 3:
            raise AlignmentError(f"sample {i}: prediction {p.shape} vs reference {r.shape}")
        if p.shape[0] == 0 or p.shape[1] == 0:
            raise AlignmentError(f"sample {i}: empty observation set")
        pairs.append((p, r))
    return pairs


def _sample_mse(p, r):
    d = p - r
    return float(np.mean(np.sum(d * d, axis=-1)))


def nrmse(predictions, references, y_norm: float) -> float:
    """Square root of the nested average of ``|pred - ref|^2 / y_norm^2``.

    The average runs over points, then times, then samples.
    """
    if not y_norm > 0:
        raise InvalidSpecError(f"y_norm must be positive, got {y_norm}")
    pairs = _aligned(predictions, references)
    # mean over (n_t, n_p) equals the nested mean because n_p is fixed per sample
    return float(np.sqrt(np.mean([_sample_mse(p, r) for p, r in pairs])) / y_norm)


def _nested_mean(fields):
    return np.mean([f.reshape(-1, f.shape[-1]).mean(axis=0) for f in fields], axis=0)


def pearson_dissimilarity(predictions, references) -> float:
    """``1 - rho`` with sums pooled over all observations.

    The centring vectors are the nested averages of each field.
    """
    pairs = _aligned(predictions, references)
    if sum(p.shape[0] * p.shape[1] for p, _ in pairs) < 2:
        raise UndefinedCorrelationError("need at least two observations")
    P = [p for p, _ in pairs]
    R = [r for _, r in pairs]
    mp, mr = _nested_mean(P), _nested_mean(R)
    num = spp = srr = 0.0
    for p, r in pairs:
        dp = (p - mp).ravel()
        dr = (r - mr).ravel()
        num += float(dp @ dr)
        spp += float(dp @ dp)
        srr += float(dr @ dr)
    if spp == 0.0 or srr == 0.0:
        raise UndefinedCorrelationError("a field has zero variance; correlation undefined")
    rho = num / np.sqrt(spp * srr)
    return float(1.0 - min(1.0, max(-1.0, rho)))


def time_window_mask(times, window) -> np.ndarray:
    """Observations with ``lo < t <= hi`` (``window=None`` keeps everything)."""
    times = np.asarray(times, dtype=np.float64)
    if window is None:
        return np.ones(times.shape, dtype=bool)
    lo, hi = window
    if not hi > lo:
        raise InvalidSpecError(f"empty time window {window}")
    return (times > lo) & (times <= hi)


@dataclass
class EvaluationReport:
    nrmse: float
    pearson_dissimilarity: float
    per_sample_nrmse: list = field(default_factory=list)
    n_samples: int = 0
    n_times: int = 0
    n_points: int = 0
    time_window: Optional[tuple] = None

    @property
    def window_tag(self) -> str:
        if self.time_window is None:
            return "all"
        lo, hi = self.time_window
        return f"{lo:g}-{hi:g}"


def evaluate(predictions, references, times, y_norm: float, window=None) -> EvaluationReport:
    """Both metrics restricted to a time window.

    ``times`` lists the observation times of each sample.  Samples without
    any observation inside the window are dropped.
    """
    pairs = _aligned(predictions, references)
    if len(times) != len(pairs):
        raise AlignmentError("need one time vector per sample")
    P, R = [], []
    n_t = n_p = 0
    for (p, r), t in zip(pairs, times):
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (p.shape[0],):
            raise AlignmentError(f"time vector {t.shape} does not match {p.shape[0]} observed times")
        keep = time_window_mask(t, window)
        if not keep.any():
            continue
        P.append(p[keep])
        R.append(r[keep])
        n_t += int(keep.sum())
        n_p += int(keep.sum()) * p.shape[1]
    if not P:
        raise AlignmentError(f"no observations inside window {window}")
    per = [float(np.sqrt(_sample_mse(p, r)) / y_norm) for p, r in zip(P, R)]
    return EvaluationReport(
        nrmse=nrmse(P, R, y_norm),
        pearson_dissimilarity=pearson_dissimilarity(P, R),
        per_sample_nrmse=per,
        n_samples=len(P),
        n_times=n_t,
        n_points=n_p,
        time_window=None if window is None else tuple(window),
    )


def write_metrics_csv(path, rows: Sequence[dict], append: bool = False):
    """Rows are dicts keyed by :data:`METRICS_COLUMNS`; values use ``repr`` precision."""
    path = Path(path)
    exists = path.exists() and append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        if not exists:
            w.writeheader()
        for row in rows:
            row = dict(row)
            if isinstance(row.get("value"), float):
                row["value"] = repr(row["value"])
            w.writerow({k: row.get(k, "") for k in METRICS_COLUMNS})


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
    return rows
