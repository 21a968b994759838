"""Classification metrics, leave-one-series-out CV and the simulation study."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import decode as _decode
from .fit import PosteriorDraws, SamplerConfig, sample_posterior
from .model import (
    Family,
    LabeledSeries,
    ModelError,
    ModelSpec,
    Params,
    Priors,
    SojournFamily,
    conditional_means,
)
from .simulate import ScenarioConfig, derive_seed, make_rng, simulate_cell

PROB_FLOOR = 1e-12


def accuracy(true_labels, predicted_labels) -> float:
    a = np.asarray(true_labels)
    b = np.asarray(predicted_labels)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty label vectors")
    return float(np.mean(a == b))


def cross_entropy(true_labels, local_probs) -> tuple[float, float]:
    """(total, mean per observation) of -log p(true state), p floored at 1e-12.

    Labels are 0-based state indices into the columns of ``local_probs``.
    """
    probs = np.asarray(local_probs, dtype=float)
    labels = np.asarray(true_labels)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError("probability matrix does not match the label vector")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ModelError("label outside the state range")
    p = np.maximum(probs[np.arange(labels.size), labels], PROB_FLOOR)
    total = float(-np.sum(np.log(p)))
    return total, total / labels.size


def quartiles(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3)}


def series_hash(series: LabeledSeries) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(series.obs).tobytes())
    if series.labels is not None:
        h.update(np.ascontiguousarray(series.labels).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

METRICS = ("accuracy_local", "accuracy_global", "ce_total", "ce_mean")


@dataclass
class EvalReport:
    """Per-(fold, draw) rows, per-fold pooled rows and quartile summaries."""

    rows: list = field(default_factory=list)
    fold_rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    train_hashes: dict = field(default_factory=dict)
    rmse: np.ndarray | None = None

    def summarize(self) -> "EvalReport":
        self.summary = {m: quartiles([r[m] for r in self.rows]) for m in METRICS}
        return self


def _draw_metrics(labels, res) -> dict:
    ce_total, ce_mean = cross_entropy(labels, res.local_probs)
    return {
        "accuracy_local": accuracy(labels, res.local_path),
        "accuracy_global": accuracy(labels, res.global_path),
        "ce_total": ce_total,
        "ce_mean": ce_mean,
    }


def evaluate_fold(held: LabeledSeries, draws: PosteriorDraws, spec: ModelSpec, fold: int) -> tuple[list, dict]:
    res = _decode.decode(held, draws, spec, mode="both")
    rows = [{"fold": fold, "series_id": held.id, "draw": d, **_draw_metrics(held.labels, r)}
            for d, r in enumerate(res.per_draw)]
    pooled = {"fold": fold, "series_id": held.id, **_draw_metrics(held.labels, res)}
    return rows, pooled


def pick_folds(n: int, n_folds: int | None, seed: int) -> list[int]:
    if n_folds is None or n_folds >= n:
        return list(range(n))
    return sorted(make_rng(seed, 0).choice(n, size=n_folds, replace=False).tolist())


def loocv(series_set, priors: Priors, spec: ModelSpec, n_pred_draws: int, seed: int,
          n_folds: int | None = None, sampler: SamplerConfig | None = None,
          folds=None) -> EvalReport:
    """Leave-one-series-out cross-validation.

    Each fold fits on every other series, draws ``n_pred_draws`` parameter
    sets and decodes the held-out series once per draw with both decoders.
    With ``n_folds`` smaller than the number of series, that many held-out
    series are picked at random (deterministically from ``seed``);
    ``folds`` lists held-out indices explicitly instead.
    """
    series_set = list(series_set)
    n = len(series_set)
    if n < 2:
        raise ModelError("cross-validation needs at least two series")
    if folds is None:
        folds = pick_folds(n, n_folds, seed)
    hashes = [series_hash(s) for s in series_set]
    report = EvalReport()
    for i in folds:
        train = [s for k, s in enumerate(series_set) if k != i]
        train_h = [h for k, h in enumerate(hashes) if k != i]
        if hashes[i] in train_h:
            raise ModelError(f"held-out series {i} also appears in its training set")
        report.train_hashes[i] = train_h
        draws = sample_posterior(train, priors, spec, n_pred_draws, derive_seed(seed, 1, i), sampler)
        rows, pooled = evaluate_fold(series_set[i], draws, spec, i)
        report.rows.extend(rows)
        report.fold_rows.append(pooled)
    return report.summarize()


# ---------------------------------------------------------------------------
# Posterior predictive check
# ---------------------------------------------------------------------------


def _check_draw(params: Params, spec: ModelSpec):
    if (params.n_states, params.obs_dim, params.ar_order) != (spec.n_states, spec.obs_dim, spec.ar_order):
        raise ModelError("posterior draw does not match the model spec")


def rmse_posterior_predictive(series_set, draws, spec: ModelSpec, n_draws: int = 100,
                              seed: int = 0) -> np.ndarray:
    """RMSE per observed dimension of posterior-predictive replicates.

    Replicate r uses draw r (cycling when there are fewer draws): states are
    sampled per time step from the local marginals, and observations from
    the state's Gaussian, conditioning AR means on observed lags. The first
    p time steps of each series have no emission model and are skipped.
    Returns an (n_draws, obs_dim) array.
    """
    series_set = [series_set] if isinstance(series_set, LabeledSeries) else list(series_set)
    draws = [draws] if isinstance(draws, Params) else list(getattr(draws, "draws", draws))
    if not draws:
        raise ModelError("no posterior draws")
    for p in draws:
        _check_draw(p, spec)
    rng = make_rng(seed)
    p_ar = spec.ar_order
    out = np.empty((n_draws, spec.obs_dim))
    cache: dict = {}
    for r in range(n_draws):
        k = r % len(draws)
        params = draws[k]
        sq = np.zeros(spec.obs_dim)
        count = 0
        for si, s in enumerate(series_set):
            key = (k, si)
            if key not in cache:
                probs = _decode.decode(s, params, spec, mode="local").local_probs
                cache[key] = (np.cumsum(probs, axis=1), conditional_means(params, s.obs))
            cum, cmeans = cache[key]
            T = len(s)
            u = rng.random(T)
            states = np.minimum((u[:, None] > cum).sum(axis=1), spec.n_states - 1)
            sd = np.sqrt(params.variances[states])
            pred = cmeans[np.arange(T), states] + sd * rng.standard_normal((T, spec.obs_dim))
            err = (pred - s.obs)[p_ar:]
            sq += (err ** 2).sum(axis=0)
            count += err.shape[0]
        out[r] = np.sqrt(sq / max(count, 1))
    return out


# ---------------------------------------------------------------------------
# Simulation study
# ---------------------------------------------------------------------------

STUDY_MODELS = {
    "HMM": ModelSpec(family=Family.HMM, n_states=2, obs_dim=1, ar_order=0),
    "HSMM": ModelSpec(family=Family.HSMM, n_states=2, obs_dim=1, ar_order=0,
                      sojourn_family=SojournFamily.NEGBINOMIAL),
}


@dataclass(frozen=True)
class StudyConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    n_folds: int | None = None
    n_pred_draws: int = 30
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    @classmethod
    def desk(cls, **scenario_kw) -> "StudyConfig":
        """3 series of length 1000, 2 sampled folds, 10 predictive draws."""
        sc = ScenarioConfig(n_series=3, series_length=1000, **scenario_kw)
        return cls(scenario=sc, n_folds=2, n_pred_draws=10)

    @classmethod
    def full(cls, **scenario_kw) -> "StudyConfig":
        """Ten series of length 3000, every fold, 30 predictive draws."""
        return cls(scenario=ScenarioConfig(n_series=10, series_length=3000, **scenario_kw),
                   n_folds=None, n_pred_draws=30)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "n_folds": self.n_folds,
                "n_pred_draws": self.n_pred_draws, "sampler": self.sampler.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        return cls(scenario=ScenarioConfig.from_dict(d.get("scenario", {})),
                   n_folds=d.get("n_folds"), n_pred_draws=d.get("n_pred_draws", 30),
                   sampler=SamplerConfig(**d.get("sampler", {})))


STUDY_COLUMNS = ("accuracy_local", "accuracy_global", "ce_mean", "ce_total")


def run_cell(cell, config: StudyConfig, seed: int) -> list[dict]:
    series = simulate_cell(cell, config.scenario.n_series, config.scenario.series_length, seed)
    # both models are scored on the same held-out series
    folds = pick_folds(len(series), config.n_folds, derive_seed(seed, cell.index, 99))
    out = []
    for mi, (name, spec) in enumerate(STUDY_MODELS.items()):
        priors = Priors.default(spec)
        rep = loocv(series, priors, spec, config.n_pred_draws, derive_seed(seed, cell.index, mi),
                    sampler=config.sampler, folds=folds)
        row = {**cell.as_row(), "model": name}
        for m in STUDY_COLUMNS:
            for q, v in rep.summary[m].items():
                row[f"{m}_{q}"] = v
        out.append(row)
    return out


def _workers() -> int:
    env = os.environ.get("SEMIMARKOV_THREADS")
    n = int(env) if env else (os.cpu_count() or 1)
    return max(1, n)


def run_simulation_study(config: StudyConfig, seed: int = 0, cells=None) -> list[dict]:
    """One row per (cell, model) with median/Q1/Q3 of each metric.

    Cells run in worker processes when ``SEMIMARKOV_THREADS`` (default: CPU
    count) exceeds 1; every cell's randomness derives from (seed, cell index)
    so the table does not depend on scheduling.
    """
    cells = config.scenario.cells() if cells is None else list(cells)
    n = min(_workers(), len(cells))
    if n <= 1:
        results = [run_cell(c, config, seed) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(run_cell, cells, [config] * len(cells), [seed] * len(cells)))
    return [row for rows in results for row in rows]
