"""Domain types, emission and sojourn densities, complete-data likelihood.

States are indexed from 0 inside the library. File formats (CSV, JSON)
use 1-based labels; conversion happens in :mod:`semimarkov.io`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.special import gammaln, log_ndtr, xlogy

LOG_2PI = math.log(2.0 * math.pi)

# Returned by log_posterior for parameters outside the prior support.
IMPOSSIBLE = -np.inf


class ModelError(ValueError):
    """Invalid model input: bad parameters, dimensions or labels."""


class Family(str, Enum):
    HMM = "HMM"
    HSMM = "HSMM"


class SojournFamily(str, Enum):
    GEOMETRIC = "Geometric"
    NEGBINOMIAL = "NegBinomial"


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Structural choices of a model: family, AR order, sizes, durations.

    ``max_duration`` is the truncation ``D`` of the duration support used by
    the HSMM decoders. ``None`` picks a value from the fitted sojourn
    distributions at decode time.
    """

    family: Family = Family.HSMM
    n_states: int = 2
    obs_dim: int = 1
    ar_order: int = 0
    sojourn_family: SojournFamily = SojournFamily.NEGBINOMIAL
    max_duration: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "sojourn_family", SojournFamily(self.sojourn_family))
        if self.family is Family.HMM:
            object.__setattr__(self, "sojourn_family", SojournFamily.GEOMETRIC)
            object.__setattr__(self, "max_duration", None)
        if self.n_states < 1:
            raise ModelError("n_states must be >= 1")
        if self.obs_dim < 1:
            raise ModelError("obs_dim must be >= 1")
        if self.ar_order < 0:
            raise ModelError("ar_order must be >= 0")
        if self.max_duration is not None and self.max_duration < 1:
            raise ModelError("max_duration must be >= 1")

    @property
    def is_hsmm(self) -> bool:
        return self.family is Family.HSMM

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "n_states": self.n_states,
            "obs_dim": self.obs_dim,
            "ar_order": self.ar_order,
            "sojourn_family": self.sojourn_family.value,
            "max_duration": self.max_duration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: d[k] for k in (
            "family", "n_states", "obs_dim", "ar_order", "sojourn_family", "max_duration"
        ) if k in d})


# ---------------------------------------------------------------------------
# Sojourn distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Geometric:
    """Sojourn of a Markov state with self-transition probability ``stay``.

    pmf(u) = stay**(u-1) * (1 - stay), u >= 1.
    """

    stay: float

    def __post_init__(self):
        if not 0.0 <= self.stay < 1.0:
            raise ModelError(f"geometric stay probability must be in [0, 1), got {self.stay}")

    def logpmf(self, u):
        u = np.asarray(u, dtype=float)
        return xlogy(u - 1.0, self.stay) + math.log1p(-self.stay)

    def expected_length(self) -> float:
        return 1.0 / (1.0 - self.stay)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.geometric(1.0 - self.stay, size=size)


@dataclass(frozen=True)
class NegBinomial:
    """Negative binomial with mean ``mean`` and dispersion ``dispersion``,
    shifted onto {1, 2, ...}: pmf(u) = NB(u - 1; m, k).

    The shifted variable has mean ``m + 1``; ``k = 1`` is the geometric
    with success probability ``1/(m+1)``.
    """

    mean: float
    dispersion: float

    def __post_init__(self):
        if not (self.mean > 0 and np.isfinite(self.mean)):
            raise ModelError(f"negative binomial mean must be > 0, got {self.mean}")
        if not (self.dispersion > 0 and np.isfinite(self.dispersion)):
            raise ModelError(f"negative binomial dispersion must be > 0, got {self.dispersion}")

    def logpmf(self, u):
        return nb_logpmf(np.asarray(u, dtype=float) - 1.0, self.mean, self.dispersion)

    def expected_length(self) -> float:
        return self.mean + 1.0

    def sample(self, rng: np.random.Generator, size=None):
        m, k = self.mean, self.dispersion
        return 1 + rng.negative_binomial(k, k / (k + m), size=size)


SojournDist = Union[Geometric, NegBinomial]


def nb_logpmf(y, m, k):
    """Log pmf of the (unshifted) negative binomial at counts ``y >= 0``."""
    y = np.asarray(y, dtype=float)
    return (
        gammaln(y + k) - gammaln(k) - gammaln(y + 1.0)
        + k * (math.log(k) - math.log(k + m))
        + xlogy(y, m / (k + m))
    )


def sojourn_pmf(dist: SojournDist, u: int) -> float:
    if int(u) != u or u < 1:
        raise ModelError(f"sojourn length must be a positive integer, got {u}")
    return float(np.exp(dist.logpmf(u)))


def sojourn_dists(params: "Params", spec: ModelSpec) -> list[SojournDist]:
    """Per-state sojourn distributions implied by ``params``."""
    J = spec.n_states
    if not spec.is_hsmm:
        return [Geometric(float(params.tpm[j, j])) for j in range(J)]
    if params.sojourn_mean is None:
        raise ModelError("HSMM params need sojourn parameters")
    if spec.sojourn_family is SojournFamily.GEOMETRIC:
        return [Geometric(m / (m + 1.0)) for m in params.sojourn_mean]
    return [NegBinomial(float(m), float(k))
            for m, k in zip(params.sojourn_mean, params.sojourn_dispersion)]


def covering_duration(dist: SojournDist, mass: float = 0.999, cap: int | None = None) -> int:
    """Smallest D with sum_{u<=D} pmf(u) >= mass (optionally capped)."""
    total, u, chunk = 0.0, 0, 256
    while True:
        us = np.arange(u + 1, u + chunk + 1)
        cum = total + np.cumsum(np.exp(dist.logpmf(us)))
        hit = np.nonzero(cum >= mass)[0]
        if hit.size:
            D = int(us[hit[0]])
            break
        total, u = float(cum[-1]), u + chunk
        if cap is not None and u >= cap:
            return cap
        chunk *= 2
    return D if cap is None else min(D, cap)


def truncated_log_pmf(dist: SojournDist, D: int, renormalize: bool = True) -> np.ndarray:
    """Log pmf on {1..D}, renormalized to sum to one when requested."""
    lp = np.asarray(dist.logpmf(np.arange(1, D + 1)), dtype=float)
    if renormalize:
        lp = lp - np.logaddexp.reduce(lp)
    return lp


def duration_log_pmf(params: "Params", spec: ModelSpec, T: int,
                     max_duration: int | None = None, coverage: float = 0.999) -> np.ndarray:
    """(J, D_eff) table of log d_j(d) used by the HSMM decoders.

    D defaults to ``spec.max_duration`` and then to the smallest value
    covering ``coverage`` of every state's pmf, capped at T. Durations
    beyond T are infeasible under the right-censoring convention, so the
    table has ``min(D, T)`` columns. The pmf is renormalized over
    {1..D} only when ``D < T`` removes feasible durations; otherwise the
    raw pmf is used, which keeps geometric sojourns an exact HMM embedding.
    """
    dists = sojourn_dists(params, spec)
    D = max_duration if max_duration is not None else spec.max_duration
    if D is None:
        # a single state has exactly one feasible segmentation: one run of length T
        D = T if spec.n_states == 1 else max(covering_duration(d, coverage, cap=T) for d in dists)
    if D < 1:
        raise ModelError("max_duration must be >= 1")
    renorm = D < T
    D_eff = min(D, T)
    return np.vstack([truncated_log_pmf(d, D_eff, renormalize=renorm) for d in dists])


# ---------------------------------------------------------------------------
# Parameters, data, priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Params:
    """Model parameters.

    Arrays: ``delta`` (J,), ``tpm`` (J, J), ``means`` (J, dim),
    ``variances`` (J, dim), ``ar_coeffs`` (J, p, dim) holding the diagonal
    of each lag matrix, and for HSMMs ``sojourn_mean``/``sojourn_dispersion``
    (J,). Construction only checks shapes; :meth:`validate` checks
    probability and positivity constraints.
    """

    delta: np.ndarray
    tpm: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    ar_coeffs: np.ndarray | None = None
    sojourn_mean: np.ndarray | None = None
    sojourn_dispersion: np.ndarray | None = None

    def __post_init__(self):
        delta = _frozen(self.delta)
        tpm = _frozen(self.tpm)
        means = np.array(self.means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        J, dim = means.shape
        variances = np.array(self.variances, dtype=float).reshape(J, dim)
        ar = self.ar_coeffs
        ar = np.zeros((J, 0, dim)) if ar is None else np.array(ar, dtype=float)
        if ar.ndim == 2:
            ar = ar.reshape(J, -1, dim) if dim > 1 else ar[:, :, None]
        if delta.shape != (J,) or tpm.shape != (J, J) or ar.shape[0] != J or ar.shape[2] != dim:
            raise ModelError("inconsistent parameter shapes")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "tpm", tpm)
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "variances", _frozen(variances))
        object.__setattr__(self, "ar_coeffs", _frozen(ar))
        for name in ("sojourn_mean", "sojourn_dispersion"):
            v = getattr(self, name)
            if v is not None:
                v = _frozen(v).reshape(J)
                object.__setattr__(self, name, v)
        if self.sojourn_mean is not None and self.sojourn_dispersion is None:
            object.__setattr__(self, "sojourn_dispersion", _frozen(np.ones(J)))

    @property
    def n_states(self) -> int:
        return self.delta.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.means.shape[1]

    @property
    def ar_order(self) -> int:
        return self.ar_coeffs.shape[1]

    def in_support(self, spec: ModelSpec) -> bool:
        try:
            self.validate(spec)
        except ModelError:
            return False
        return True

    def validate(self, spec: ModelSpec, atol: float = 1e-12) -> "Params":
        J = spec.n_states
        if (self.n_states, self.obs_dim, self.ar_order) != (J, spec.obs_dim, spec.ar_order):
            raise ModelError("params do not match model spec dimensions")
        for name, a in (("delta", self.delta), ("tpm", self.tpm)):
            if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
                raise ModelError(f"{name} entries must lie in [0, 1]")
        if abs(self.delta.sum() - 1.0) > atol:
            raise ModelError("delta must sum to 1")
        if spec.is_hsmm:
            if np.any(np.diag(self.tpm) != 0):
                raise ModelError("HSMM transition matrix must have a zero diagonal")
            rows = self.tpm.sum(axis=1)
            if J > 1 and np.any(np.abs(rows - 1.0) > atol):
                raise ModelError("tpm rows must sum to 1")
            if self.sojourn_mean is None:
                raise ModelError("HSMM params need sojourn parameters")
            if np.any(~(self.sojourn_mean > 0)) or np.any(~(self.sojourn_dispersion > 0)):
                raise ModelError("sojourn parameters must be > 0")
            if not (np.all(np.isfinite(self.sojourn_mean)) and np.all(np.isfinite(self.sojourn_dispersion))):
                raise ModelError("sojourn parameters must be finite")
        else:
            if np.any(np.abs(self.tpm.sum(axis=1) - 1.0) > atol):
                raise ModelError("tpm rows must sum to 1")
        if not np.all(np.isfinite(self.means)) or not np.all(np.isfinite(self.ar_coeffs)):
            raise ModelError("emission parameters must be finite")
        if np.any(~(self.variances > 0)) or not np.all(np.isfinite(self.variances)):
            raise ModelError("variances must be > 0")
        return self

    def permuted(self, perm: Sequence[int]) -> "Params":
        """Relabel states: new state ``i`` is old state ``perm[i]``."""
        p = np.asarray(perm)
        return Params(
            delta=self.delta[p],
            tpm=self.tpm[np.ix_(p, p)],
            means=self.means[p],
            variances=self.variances[p],
            ar_coeffs=self.ar_coeffs[p],
            sojourn_mean=None if self.sojourn_mean is None else self.sojourn_mean[p],
            sojourn_dispersion=None if self.sojourn_dispersion is None else self.sojourn_dispersion[p],
        )


@dataclass(frozen=True)
class LabeledSeries:
    """Observation matrix ``obs`` (T, dim) with optional 0-based ``labels``."""

    obs: np.ndarray
    labels: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        obs = np.array(self.obs, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or obs.shape[0] < 1:
            raise ModelError("obs must be a non-empty (T, dim) matrix")
        object.__setattr__(self, "obs", _frozen(obs))
        if self.labels is not None:
            labels = np.array(self.labels)
            if labels.shape != (obs.shape[0],):
                raise ModelError("labels must have length T")
            if labels.size and (np.any(labels != np.round(labels)) or labels.min() < 0):
                raise ModelError("labels must be non-negative integers")
            object.__setattr__(self, "labels", _frozen(labels, dtype=np.int64))

    def __len__(self) -> int:
        return self.obs.shape[0]

    def check_labels(self, n_states: int) -> None:
        if self.labels is None:
            raise ModelError(f"series {self.id!r} has no labels")
        if self.labels.max() >= n_states:
            raise ModelError(f"series {self.id!r} has labels outside 1..{n_states}")


def runs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run-length encoding: (state of each run, length of each run)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return labels[:0], labels[:0]
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [labels.size])))
    return labels[starts], lengths


@dataclass(frozen=True)
class Priors:
    """Independent priors on every parameter block.

    Dirichlet concentrations for the rows of the t.p.m. and for the
    initial distribution; normal priors on emission means and AR
    coefficients; normal priors truncated to (0, inf) on emission standard
    deviations; log-normal priors on sojourn ``m`` and ``k`` (column 0 and 1
    of the ``sojourn_log_*`` arrays).
    """

    tpm_concentration: np.ndarray
    delta_concentration: np.ndarray
    mean_loc: np.ndarray
    mean_scale: np.ndarray
    sd_loc: np.ndarray
    sd_scale: np.ndarray
    ar_loc: np.ndarray
    ar_scale: np.ndarray
    sojourn_log_loc: np.ndarray
    sojourn_log_scale: np.ndarray

    def __post_init__(self):
        for f in self.__dataclass_fields__:
            object.__setattr__(self, f, _frozen(getattr(self, f)))
        conc = np.concatenate([self.tpm_concentration.ravel(), self.delta_concentration.ravel()])
        scales = np.concatenate([self.mean_scale.ravel(), self.sd_scale.ravel(),
                                 self.ar_scale.ravel(), self.sojourn_log_scale.ravel()])
        if np.any(~(conc > 0)) or np.any(~(scales > 0)):
            raise ModelError("prior concentrations and scales must be > 0")

    @classmethod
    def default(cls, spec: ModelSpec, *, mean_scale: float = 10.0, sd_scale: float = 10.0,
                ar_scale: float = 1.0, sojourn_loc: float = math.log(10.0),
                sojourn_scale: float = 1.5) -> "Priors":
        J, dim, p = spec.n_states, spec.obs_dim, spec.ar_order
        return cls(
            tpm_concentration=np.ones((J, J)),
            delta_concentration=np.ones(J),
            mean_loc=np.zeros((J, dim)),
            mean_scale=np.full((J, dim), mean_scale),
            sd_loc=np.zeros((J, dim)),
            sd_scale=np.full((J, dim), sd_scale),
            ar_loc=np.zeros((J, p, dim)),
            ar_scale=np.full((J, p, dim), ar_scale),
            sojourn_log_loc=np.full((J, 2), sojourn_loc),
            sojourn_log_scale=np.full((J, 2), sojourn_scale),
        )

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict, spec: ModelSpec | None = None) -> "Priors":
        if spec is None:
            return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})
        base = cls.default(spec)
        out = {}
        for k in base.__dataclass_fields__:
            ref = getattr(base, k)
            # nested empty lists lose their trailing shape in JSON
            out[k] = np.asarray(d[k], dtype=float).reshape(ref.shape) if k in d else ref
        return cls(**out)


# ---------------------------------------------------------------------------
# Emission densities
# ---------------------------------------------------------------------------


def _gauss_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def emission_logpdf(params: Params, state: int, obs_window) -> float:
    """log f_state(x_t | x_{t-p:t-1}) for a window of ``p + 1`` rows.

    The last row of ``obs_window`` is x_t; the preceding rows are the lags
    in chronological order.
    """
    w = np.asarray(obs_window, dtype=float)
    if w.ndim == 1:
        w = w[:, None] if params.obs_dim == 1 else w[None, :]
    p = params.ar_order
    if w.shape[0] != p + 1 or w.shape[1] != params.obs_dim:
        raise ModelError(f"window needs exactly {p} lagged rows plus the current row")
    mean = params.means[state].copy()
    for k in range(1, p + 1):
        mean += params.ar_coeffs[state, k - 1] * w[-1 - k]
    return float(np.sum(_gauss_logpdf(w[-1], mean, params.variances[state])))


def conditional_means(params: Params, obs: np.ndarray) -> np.ndarray:
    """(T, J, dim) AR conditional means; rows t < p are left at mu_j."""
    obs = np.asarray(obs, dtype=float)
    T = obs.shape[0]
    p = params.ar_order
    mean = np.broadcast_to(params.means, (T,) + params.means.shape).copy()
    for k in range(1, p + 1):
        if T > k:
            mean[k:] += params.ar_coeffs[None, :, k - 1, :] * obs[:-k, None, :]
    return mean


def emission_loglik(params: Params, obs: np.ndarray) -> np.ndarray:
    """(T, J) matrix of log f_j(x_t); the first p rows are zero (conditioned on)."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[1] != params.obs_dim:
        raise ModelError("observation dimension does not match params")
    mean = conditional_means(params, obs)
    ll = _gauss_logpdf(obs[:, None, :], mean, params.variances[None]).sum(axis=2)
    ll[: params.ar_order] = 0.0
    return ll


# ---------------------------------------------------------------------------
# Likelihood and posterior
# ---------------------------------------------------------------------------


def _as_series_list(series_set) -> list[LabeledSeries]:
    if isinstance(series_set, LabeledSeries):
        return [series_set]
    return list(series_set)


def complete_data_loglik(series_set: LabeledSeries | Iterable[LabeledSeries],
                         params: Params, spec: ModelSpec) -> float:
    """Joint log density of observations and labels, summed over series.

    Right-censored convention: the first run starts at t=1 and the last run
    ends at T. HSMM runs contribute log d_j(u). For HMMs the run term is
    (u - 1) log gamma_jj and each switch contributes log gamma_ij, which is
    the usual chain-rule likelihood (the final run carries no exit factor).
    """
    total = 0.0
    logG = _safe_log(params.tpm)
    dists = sojourn_dists(params, spec) if spec.is_hsmm else None
    for s in _as_series_list(series_set):
        s.check_labels(spec.n_states)
        if s.obs.shape[1] != spec.obs_dim:
            raise ModelError("observation dimension does not match spec")
        states, lengths = runs(s.labels)
        if spec.is_hsmm and spec.max_duration is not None and lengths.max() > spec.max_duration:
            raise ModelError(f"run of length {lengths.max()} exceeds max_duration {spec.max_duration}")
        ll = float(_safe_log(params.delta[states[0]]))
        if spec.is_hsmm:
            ll += sum(float(dists[j].logpmf(u)) for j, u in zip(states, lengths))
        else:
            ll += sum(float(xlogy(u - 1, params.tpm[j, j])) for j, u in zip(states, lengths))
        ll += float(logG[states[:-1], states[1:]].sum())
        em = emission_loglik(params, s.obs)
        ll += float(em[np.arange(len(s)), s.labels].sum())
        total += ll
    return total


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def dirichlet_logpdf(x: np.ndarray, alpha: np.ndarray) -> float:
    """Dirichlet log density; handles zero entries where alpha == 1."""
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if x.size <= 1:
        return 0.0
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + xlogy(alpha - 1.0, x).sum())


def truncnorm_pos_logpdf(x, loc, scale):
    """Log density of N(loc, scale^2) truncated to (0, inf)."""
    z = (np.asarray(x) - loc) / scale
    return -0.5 * (z ** 2 + LOG_2PI) - np.log(scale) - log_ndtr(np.asarray(loc) / scale)


def log_prior(params: Params, priors: Priors, spec: ModelSpec) -> float:
    if not params.in_support(spec):
        return IMPOSSIBLE
    J = spec.n_states
    lp = dirichlet_logpdf(params.delta, priors.delta_concentration)
    for j in range(J):
        if spec.is_hsmm:
            off = np.arange(J) != j
            lp += dirichlet_logpdf(params.tpm[j, off], priors.tpm_concentration[j, off])
        else:
            lp += dirichlet_logpdf(params.tpm[j], priors.tpm_concentration[j])
    lp += float(_gauss_logpdf(params.means, priors.mean_loc, priors.mean_scale ** 2).sum())
    lp += float(_gauss_logpdf(params.ar_coeffs, priors.ar_loc, priors.ar_scale ** 2).sum())
    lp += float(truncnorm_pos_logpdf(np.sqrt(params.variances), priors.sd_loc, priors.sd_scale).sum())
    if spec.is_hsmm:
        lp += float(_lognormal_logpdf(params.sojourn_mean, priors.sojourn_log_loc[:, 0],
                                      priors.sojourn_log_scale[:, 0]).sum())
        if spec.sojourn_family is SojournFamily.NEGBINOMIAL:
            lp += float(_lognormal_logpdf(params.sojourn_dispersion, priors.sojourn_log_loc[:, 1],
                                          priors.sojourn_log_scale[:, 1]).sum())
    return lp


def _lognormal_logpdf(x, loc, scale):
    lx = np.log(x)
    return _gauss_logpdf(lx, loc, scale ** 2) - lx


def log_posterior(series_set, params: Params, priors: Priors, spec: ModelSpec) -> float:
    """Unnormalized log posterior; ``IMPOSSIBLE`` outside the support."""
    lp = log_prior(params, priors, spec)
    if lp == IMPOSSIBLE:
        return IMPOSSIBLE
    return complete_data_loglik(series_set, params, spec) + lp
