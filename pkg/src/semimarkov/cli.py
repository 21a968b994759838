"""Command-line entry point: ``semimarkov <subcommand> ...``.

Every output file ``X`` gets a sibling ``X.manifest.json`` (directories get
``manifest.json`` inside) holding the config hash, seed and library
versions. Re-running with the same inputs and seed rewrites identical bytes.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .decode import decode
from .evaluate import StudyConfig, loocv, run_simulation_study
from .features import FEATURE_NAMES, RawAccel, window_features
from .fit import FitError, SamplerConfig, map_fit, sample_posterior
from .model import LabeledSeries, ModelError, ModelSpec, Params, Priors
from .simulate import ScenarioConfig, derive_seed, scenario_params, simulate_cell, simulate_series

log = logging.getLogger("semimarkov")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input not found: {p}")
    return p


def _load_config(path) -> dict:
    return io.read_json(_require(path)) if path else {}


def _load_spec(args, config) -> ModelSpec:
    if getattr(args, "spec", None):
        return io.spec_from_json(_require(args.spec))
    if "spec" in config:
        return ModelSpec.from_dict(config["spec"])
    raise UsageError("a model spec is required (--spec or 'spec' in --config)")


def _load_priors(args, config, spec) -> Priors:
    if args.priors:
        return Priors.from_dict(io.read_json(_require(args.priors)), spec)
    return Priors.from_dict(config.get("priors", {}), spec)


def _load_series(paths) -> list[LabeledSeries]:
    if not paths:
        raise UsageError("--series needs at least one CSV file")
    return [io.read_series_csv(_require(p)) for p in paths]


def _write_manifest(out: Path, config: dict, seed, **extra):
    target = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    io.write_json(target, io.manifest(config, seed, **extra))


def _load_draws(path) -> list[Params]:
    d = io.read_json(_require(path))
    if "draws" in d:
        return [io.params_from_dict(p) for p in d["draws"]]
    return [io.params_from_dict(d.get("params", d))]


def _plot_json(rows, x_key, metrics, group_key=None) -> dict:
    """Vega-style list of series: one per (group, metric), with median and quartiles."""
    groups = sorted({r[group_key] for r in rows}) if group_key else [None]
    series = []
    for g in groups:
        sub = [r for r in rows if group_key is None or r[group_key] == g]
        for m in metrics:
            series.append({
                "name": m if g is None else f"{g}:{m}",
                "x": [r[x_key] for r in sub],
                "median": [r[f"{m}_median"] for r in sub],
                "q1": [r[f"{m}_q1"] for r in sub],
                "q3": [r[f"{m}_q3"] for r in sub],
            })
    return {"series": series}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> None:
    """Scenario grid (default) or a user model given by 'spec' and 'params' in the config."""
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if "params" in config:
        spec = _load_spec(args, config)
        params = io.params_from_dict(config["params"])
        n, T = int(config.get("n_series", 1)), int(config["series_length"])
        names = []
        for i in range(n):
            s = simulate_series(spec, params, T, derive_seed(args.seed, i), series_id=f"series_{i + 1:03d}")
            io.write_series_csv(out / f"{s.id}.csv", s)
            names.append(f"{s.id}.csv")
        full = {"spec": spec.to_dict(), "params": io.params_to_dict(params), "n_series": n,
                "series_length": T}
        _write_manifest(out, full, args.seed, files=names)
        return
    base = StudyConfig.desk().scenario if args.scale == "desk" else StudyConfig.full().scenario
    grid = config.get("scenario", config)
    sc = ScenarioConfig.from_dict({**base.to_dict(), **grid})
    cells = []
    for cell in sc.cells():
        for s in simulate_cell(cell, sc.n_series, sc.series_length, args.seed):
            io.write_series_csv(out / f"{s.id}.csv", s)
        cells.append({**cell.as_row(), "params": io.params_to_dict(scenario_params(cell))})
    _write_manifest(out, {"scenario": sc.to_dict()}, args.seed, cells=cells)


def cmd_features(args) -> None:
    config = _load_config(args.config)
    rate = int(config.get("rate", args.rate))
    smooth = int(config.get("smooth_window", args.smooth_window))
    static = int(config.get("static_window", args.static_window))
    paths = args.series or []
    if len(paths) != 1:
        raise UsageError("features takes exactly one raw CSV in --series")
    table = np.genfromtxt(_require(paths[0]), delimiter=",", names=True)
    names = table.dtype.names
    for col in ("t", "surge", "sway", "heave"):
        if col not in names:
            raise ModelError(f"raw CSV lacks column {col!r}")
    labels = table["label"].astype(np.int64) - 1 if "label" in names else None
    raw = RawAccel(t=table["t"], surge=table["surge"], sway=table["sway"], heave=table["heave"],
                   labels=labels, rate=float(rate))
    fs = window_features(raw, rate=rate, smooth_window=smooth, static_window=static)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_series_csv(out, LabeledSeries(fs.values, fs.labels, out.stem), dim_names=FEATURE_NAMES, t=fs.start)
    _write_manifest(out, {"rate": rate, "smooth_window": smooth, "static_window": static}, args.seed,
                    input=Path(paths[0]).name)


def cmd_fit(args) -> None:
    config = _load_config(args.config)
    spec = _load_spec(args, config)
    priors = _load_priors(args, config, spec)
    series = _load_series(args.series)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    full = {"spec": spec.to_dict(), "priors": priors.to_dict(), "series": [s.id for s in series]}
    if args.map or config.get("map"):
        params = map_fit(series, priors, spec)
        io.write_json(out, {"spec": spec.to_dict(), "params": io.params_to_dict(params)})
        _write_manifest(out, {**full, "map": True}, args.seed)
        return
    n_draws = int(args.n_draws or config.get("n_draws", 100))
    sampler = SamplerConfig(**config.get("sampler", {}))
    draws = sample_posterior(series, priors, spec, n_draws, args.seed, sampler)
    full.update(n_draws=n_draws, sampler=sampler.to_dict())
    io.write_json(out, {"spec": spec.to_dict(), "draws": [io.params_to_dict(p) for p in draws],
                        "diagnostics": draws.diagnostics})
    lines = [f"draws: {n_draws}  burn_in: {sampler.burn_in}  thin: {sampler.thin}  seed: {args.seed}"]
    for kind in ("emission", "sojourn"):
        for name, d in draws.diagnostics.get(kind, {}).items():
            if d.get("prior_only"):
                lines.append(f"{kind:9s} {name:14s} prior only (no data)")
            else:
                burn = d["burn_in_acceptance"]
                burn = "n/a" if burn is None else f"{burn:.3f}"
                lines.append(f"{kind:9s} {name:14s} acceptance {d['acceptance']:.3f}"
                             f"  burn-in {burn}  scale {d['proposal_scale']:.4g}")
    out.with_name(out.name + ".diagnostics.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(out, full, args.seed)


def _decode_rows(res, J) -> list[dict]:
    rows = []
    for t in range(res.local_probs.shape[0]):
        row = {"t": t + 1, "state_global": int(res.global_path[t]) + 1}
        for j in range(J):
            row[f"prob_{j + 1}"] = float(res.local_probs[t, j])
        row["state_local"] = int(res.local_path[t]) + 1
        rows.append(row)
    return rows


def cmd_decode(args) -> None:
    config = _load_config(args.config)
    if not args.draws:
        raise UsageError("decode needs --draws (a params or draws JSON)")
    draws_doc = io.read_json(_require(args.draws))
    if not args.spec and "spec" not in config and "spec" in draws_doc:
        config = {**config, "spec": draws_doc["spec"]}
    spec = _load_spec(args, config)
    draws = _load_draws(args.draws)
    series = _load_series(args.series)
    out = Path(args.out)
    J = spec.n_states
    cols = ["t", "state_global", *[f"prob_{j + 1}" for j in range(J)], "state_local"]
    if len(series) == 1:
        targets = [(series[0], out)]
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = [(s, out / f"{s.id}.csv") for s in series]
    for s, path in targets:
        res = decode(s, draws if len(draws) > 1 else draws[0], spec, mode="both")
        io.write_table_csv(path, _decode_rows(res, J), cols)
    _write_manifest(out, {"spec": spec.to_dict(), "draws": io.config_hash(draws_doc),
                          "series": [s.id for s in series]}, args.seed)


def cmd_cv(args) -> None:
    config = _load_config(args.config)
    spec = _load_spec(args, config)
    priors = _load_priors(args, config, spec)
    series = _load_series(args.series)
    n_pred = int(args.n_draws or config.get("n_pred_draws", 30))
    sampler = SamplerConfig(**config.get("sampler", {}))
    rep = loocv(series, priors, spec, n_pred, args.seed, n_folds=config.get("n_folds"), sampler=sampler)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_table_csv(out, rep.rows)
    full = {"spec": spec.to_dict(), "priors": priors.to_dict(), "n_pred_draws": n_pred,
            "n_folds": config.get("n_folds"), "sampler": sampler.to_dict(),
            "series": [s.id for s in series]}
    _write_manifest(out, full, args.seed, summary=rep.summary, folds=rep.fold_rows,
                    train_hashes={str(k): v for k, v in rep.train_hashes.items()})
    if args.plot_json:
        io.write_json(args.plot_json, {"series": [{"name": m, **q} for m, q in rep.summary.items()]})


def cmd_study(args) -> None:
    config = _load_config(args.config)
    base = StudyConfig.desk() if args.scale == "desk" else StudyConfig.full()
    study = StudyConfig.from_dict({**base.to_dict(), **config}) if config else base
    rows = run_simulation_study(study, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_table_csv(out, rows)
    _write_manifest(out, study.to_dict(), args.seed, scale=args.scale)
    if args.plot_json:
        io.write_json(args.plot_json, _plot_json(rows, "index", ("accuracy_local", "accuracy_global", "ce_mean"),
                                                 group_key="model"))


COMMANDS = {
    "simulate": cmd_simulate,
    "features": cmd_features,
    "fit": cmd_fit,
    "decode": cmd_decode,
    "cv": cmd_cv,
    "study": cmd_study,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semimarkov",
                                     description="Supervised HMM/HSMM time-series classification")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").split("\n")[0] or None)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        if name in ("fit", "decode", "cv", "features"):
            p.add_argument("--series", nargs="+", help="input CSV file(s)")
        if name in ("fit", "decode", "cv"):
            p.add_argument("--spec", help="ModelSpec JSON")
        if name in ("fit", "cv"):
            p.add_argument("--priors", help="Priors JSON (missing fields use defaults)")
            p.add_argument("--n-draws", type=int, help="posterior draws to keep")
        if name == "fit":
            p.add_argument("--map", action="store_true", help="write the posterior mode instead of draws")
        if name == "decode":
            p.add_argument("--draws", help="params or draws JSON from fit")
        if name in ("simulate", "study"):
            p.add_argument("--scale", choices=("desk", "paper"), default="desk")
        if name in ("cv", "study"):
            p.add_argument("--plot-json", help="also write plot series as JSON")
        if name == "features":
            p.add_argument("--rate", type=int, default=40)
            p.add_argument("--smooth-window", type=int, default=10)
            p.add_argument("--static-window", type=int, default=40)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"semimarkov {args.command}: {e}", file=sys.stderr)
        return 2
    except (ModelError, FitError, ValueError, OSError, KeyError) as e:
        print(f"semimarkov {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
