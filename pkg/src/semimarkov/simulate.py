"""Synthetic series from a model, and the two-state scenario grid.

Randomness uses numpy's PCG64 generator. Seeds for independent pieces of
work (grid cells, series within a cell, folds) are derived with
``numpy.random.SeedSequence`` from a master seed plus integer keys, so
results do not depend on execution order.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .model import (
    Family,
    LabeledSeries,
    ModelError,
    ModelSpec,
    Params,
    SojournFamily,
    sojourn_dists,
)


def make_rng(seed, *keys: int) -> np.random.Generator:
    """Generator for ``seed`` refined by integer ``keys``."""
    if isinstance(seed, np.random.Generator):
        if keys:
            raise ValueError("keys need an integer seed")
        return seed
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit sub-seed for (seed, *keys)."""
    ss = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def simulate_labels(params: Params, spec: ModelSpec, T: int, rng: np.random.Generator) -> np.ndarray:
    J = spec.n_states
    labels = np.empty(T, dtype=np.int64)
    if not spec.is_hsmm:
        labels[0] = rng.choice(J, p=params.delta)
        cum = np.cumsum(params.tpm, axis=1)
        u = rng.random(T)
        for t in range(1, T):
            nxt = int(np.searchsorted(cum[labels[t - 1]], u[t], side="right"))
            labels[t] = min(nxt, J - 1)
        return labels
    dists = sojourn_dists(params, spec)
    t = 0
    state = int(rng.choice(J, p=params.delta))
    while t < T:
        d = int(dists[state].sample(rng))
        labels[t:t + d] = state
        t += d
        if J > 1:
            state = int(rng.choice(J, p=params.tpm[state]))
    return labels


def _initial_lags(params: Params, state: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """First p rows: stationary AR marginal when stationary, else N(mu, Sigma)."""
    dim = params.obs_dim
    out = np.empty((p, dim))
    for k in range(dim):
        phi = params.ar_coeffs[state, :, k]
        mu, var = params.means[state, k], params.variances[state, k]
        comp = np.zeros((p, p))
        comp[0] = phi
        comp[1:, :-1] = np.eye(p - 1)
        if np.max(np.abs(np.linalg.eigvals(comp))) < 1.0:
            Q = np.zeros((p, p))
            Q[0, 0] = var
            cov = solve_discrete_lyapunov(comp, Q)
            m = mu / (1.0 - phi.sum())
            # state vector is (x_t, x_{t-1}, ...); store chronologically
            out[:, k] = rng.multivariate_normal(np.full(p, m), cov)[::-1]
        else:
            out[:, k] = rng.normal(mu, np.sqrt(var), size=p)
    return out


def simulate_emissions(params: Params, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    T = labels.size
    p, dim = params.ar_order, params.obs_dim
    sd = np.sqrt(params.variances)
    if p == 0:
        return params.means[labels] + sd[labels] * rng.standard_normal((T, dim))
    x = np.empty((T, dim))
    x[:p] = _initial_lags(params, int(labels[0]), p, rng)[: min(p, T)]
    eps = rng.standard_normal((T, dim))
    for t in range(p, T):
        j = labels[t]
        mean = params.means[j] + (params.ar_coeffs[j] * x[t - p:t][::-1]).sum(axis=0)
        x[t] = mean + sd[j] * eps[t]
    return x


def simulate_series(spec: ModelSpec, params: Params, T: int, seed, series_id: str = "") -> LabeledSeries:
    """Draw one labelled series of length T; the last run is cut at T."""
    if T < 1:
        raise ModelError("series length must be >= 1")
    params.validate(spec)
    rng = make_rng(seed)
    labels = simulate_labels(params, spec, T, rng)
    obs = simulate_emissions(params, labels, rng)
    return LabeledSeries(obs=obs, labels=labels, id=series_id)


# ---------------------------------------------------------------------------
# Scenario grid
# ---------------------------------------------------------------------------

OVERLAP_MEANS = {"high": 0.3, "medium": 1.0, "low": 3.0}
DISPERSIONS = {
    "one_geometric": [(1.0, 10.0), (1.0, 30.0)],
    "none_geometric": [(30.0, 50.0), (80.0, 100.0)],
}


@dataclass(frozen=True)
class Scenario:
    overlap: str
    mu2: float
    sojourn_mean_avg: float
    sojourn_mean_diff: float
    dispersion_config: str
    k1: float
    k2: float
    m1: float
    m2: float
    index: int

    def as_row(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScenarioConfig:
    """Grid of two-state HSMM scenarios.

    Defaults reproduce the full menu: three overlap levels, three sojourn
    mean averages and differences, and four dispersion pairs. State 1 gets
    the larger sojourn mean unless ``larger_first`` is False.
    """

    overlaps: tuple = ("high", "medium", "low")
    sojourn_mean_avgs: tuple = (20.0, 40.0, 90.0)
    sojourn_mean_diffs: tuple = (3.0, 15.0, 30.0)
    dispersion_configs: tuple = ("one_geometric", "none_geometric")
    n_series: int = 10
    series_length: int = 3000
    larger_first: bool = True
    overlap_means: dict = field(default_factory=lambda: dict(OVERLAP_MEANS))
    dispersions: dict = field(default_factory=lambda: {k: [tuple(p) for p in v] for k, v in DISPERSIONS.items()})

    def cells(self) -> list[Scenario]:
        out = []
        combos = itertools.product(self.overlaps, self.sojourn_mean_avgs, self.sojourn_mean_diffs,
                                   self.dispersion_configs)
        idx = 0
        for ov, avg, diff, dcfg in combos:
            hi, lo = avg + diff / 2.0, avg - diff / 2.0
            if lo <= 0:
                raise ModelError(f"sojourn means must be > 0 (avg={avg}, diff={diff})")
            m1, m2 = (hi, lo) if self.larger_first else (lo, hi)
            for k1, k2 in self.dispersions[dcfg]:
                out.append(Scenario(ov, float(self.overlap_means[ov]), float(avg), float(diff),
                                    dcfg, float(k1), float(k2), m1, m2, idx))
                idx += 1
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dispersions"] = {k: [list(p) for p in v] for k, v in self.dispersions.items()}
        for k in ("overlaps", "sojourn_mean_avgs", "sojourn_mean_diffs", "dispersion_configs"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for k in ("overlaps", "sojourn_mean_avgs", "sojourn_mean_diffs", "dispersion_configs"):
            if k in d:
                d[k] = tuple(d[k])
        if "dispersions" in d:
            d["dispersions"] = {k: [tuple(p) for p in v] for k, v in d["dispersions"].items()}
        return cls(**d)


SCENARIO_SPEC = ModelSpec(family=Family.HSMM, n_states=2, obs_dim=1, ar_order=0,
                          sojourn_family=SojournFamily.NEGBINOMIAL)


def scenario_params(cell: Scenario) -> Params:
    """Generating parameters of one cell: N(0,1) vs N(mu2,1), NB sojourns."""
    return Params(
        delta=[0.5, 0.5],
        tpm=[[0.0, 1.0], [1.0, 0.0]],
        means=[[0.0], [cell.mu2]],
        variances=[[1.0], [1.0]],
        sojourn_mean=[cell.m1, cell.m2],
        sojourn_dispersion=[cell.k1, cell.k2],
    )


def simulate_cell(cell: Scenario, n_series: int, T: int, seed: int) -> list[LabeledSeries]:
    params = scenario_params(cell)
    return [simulate_series(SCENARIO_SPEC, params, T, make_rng(seed, cell.index, i),
                            series_id=f"cell{cell.index:03d}_s{i:02d}")
            for i in range(n_series)]


def scenario_grid(config: ScenarioConfig, seed: int = 0) -> list[tuple[Scenario, list[LabeledSeries]]]:
    """Simulate every cell; each cell's seed derives from (seed, cell index)."""
    return [(cell, simulate_cell(cell, config.n_series, config.series_length, seed))
            for cell in config.cells()]
