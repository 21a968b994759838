"""JSON and CSV formats.

Params JSON::

    {"delta": [...], "tpm": [[...], ...],
     "emissions": [{"mean": [...], "variances": [...], "ar_coeffs": [[...], ...]}, ...],
     "sojourns": [{"m": ..., "k": ...}, ...] | null}

``ar_coeffs`` holds one row per lag (lag 1 first), each row the diagonal
of that lag's coefficient matrix.

Series CSV: header ``t,<dim names...>[,label]``; labels are 1-based.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .model import LabeledSeries, ModelError, ModelSpec, Params


def params_to_dict(params: Params) -> dict:
    J = params.n_states
    out = {
        "delta": params.delta.tolist(),
        "tpm": params.tpm.tolist(),
        "emissions": [
            {
                "mean": params.means[j].tolist(),
                "variances": params.variances[j].tolist(),
                "ar_coeffs": params.ar_coeffs[j].tolist(),
            }
            for j in range(J)
        ],
        "sojourns": None,
    }
    if params.sojourn_mean is not None:
        out["sojourns"] = [
            {"m": float(m), "k": float(k)}
            for m, k in zip(params.sojourn_mean, params.sojourn_dispersion)
        ]
    return out


def params_from_dict(d: dict) -> Params:
    em = d["emissions"]
    dim = len(em[0]["mean"])
    soj = d.get("sojourns")
    return Params(
        delta=d["delta"],
        tpm=d["tpm"],
        means=[e["mean"] for e in em],
        variances=[e["variances"] for e in em],
        ar_coeffs=np.array([e.get("ar_coeffs", []) for e in em], dtype=float).reshape(len(em), -1, dim),
        sojourn_mean=None if soj is None else [s["m"] for s in soj],
        sojourn_dispersion=None if soj is None else [s.get("k", 1.0) for s in soj],
    )


def dumps(obj) -> str:
    """Canonical JSON text (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "), allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def manifest(config, seed: int | None, **extra) -> dict:
    """Provenance block attached to every CLI output. Contains no timestamps."""
    import scipy

    out = {
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "semimarkov": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    out.update(extra)
    return out


def read_series_csv(path, series_id: str | None = None) -> LabeledSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ModelError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise ModelError(f"{path}: header must start with 't'")
    has_label = header[-1] == "label"
    dims = header[1:-1] if has_label else header[1:]
    if not dims:
        raise ModelError(f"{path}: no observation columns")
    body = [r for r in rows[1:] if r]
    obs = np.array([[float(v) for v in r[1:1 + len(dims)]] for r in body])
    labels = None
    if has_label:
        raw = [r[-1].strip() for r in body]
        if any(v == "" for v in raw):
            labels = None
        else:
            labels = np.array([int(v) for v in raw]) - 1
            if labels.min() < 0:
                raise ModelError(f"{path}: labels must be >= 1")
    sid = series_id if series_id is not None else Path(path).stem
    return LabeledSeries(obs=obs, labels=labels, id=sid)


def write_series_csv(path, series: LabeledSeries, dim_names=None, t=None) -> None:
    T, dim = series.obs.shape
    names = list(dim_names) if dim_names is not None else (["x"] if dim == 1 else [f"x{i + 1}" for i in range(dim)])
    t = np.arange(1, T + 1) if t is None else t
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names] + (["label"] if series.labels is not None else []))
        for i in range(T):
            row = [_fmt(t[i]), *(_fmt(v) for v in series.obs[i])]
            if series.labels is not None:
                row.append(int(series.labels[i]) + 1)
            w.writerow(row)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_table_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def spec_from_json(path) -> ModelSpec:
    d = read_json(path)
    return ModelSpec.from_dict(d.get("spec", d))
