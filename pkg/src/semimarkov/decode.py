"""Local (forward-backward) and global (Viterbi) state decoding.

All recursions run in log space. Time is 1-based inside the HSMM tables
(index 0 holds the "before the series" boundary), and the public tables
are returned as (T, J) arrays aligned with the observations.

HSMM conventions (right-censored): the first run starts at t=1 with
weight delta_j d_j(u), and the last run ends exactly at T. For run-level
quantities, ``alpha_t(j)`` is the joint of X_{1:t} and a run of j ending
at t; ``beta_star_t(j)`` is the likelihood of X_{t+1:T} given a run of j
starting at t+1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import (
    LabeledSeries,
    ModelError,
    ModelSpec,
    Params,
    _safe_log,
    duration_log_pmf,
    emission_loglik,
)

# T * D * J^2 above this raises instead of running for minutes.
DEFAULT_BUDGET = 2e9


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp with max shift; all -inf slices give -inf."""
    m = a.max(axis=axis)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - np.expand_dims(safe, axis)).sum(axis=axis)) + safe


@dataclass(frozen=True)
class ForwardBackwardTables:
    """Log-space forward/backward quantities, each (T, J).

    ``log_beta_star`` is only meaningful for HSMMs (NaN for HMMs).
    ``log_xi[t, j]`` is log Pr(C_t = j, X_{1:T}).
    """

    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_beta_star: np.ndarray
    log_xi: np.ndarray
    log_evidence: float

    @property
    def marginals(self) -> np.ndarray:
        return np.exp(self.log_xi - self.log_evidence)

    def normalization_spread(self) -> float:
        """Max relative deviation of sum_j xi_t(j) from the evidence over t."""
        s = np.exp(logsumexp(self.log_xi, axis=1) - self.log_evidence)
        return float(np.max(np.abs(s - 1.0)))


@dataclass(frozen=True)
class DecodeResult:
    """Decoding output; states are 0-based.

    With posterior draws, ``per_draw`` holds one result per draw,
    ``local_probs`` is their mean and ``global_path`` is the per-time mode
    of the per-draw Viterbi paths (lowest state on ties).
    """

    local_probs: np.ndarray | None
    local_path: np.ndarray | None
    global_path: np.ndarray | None
    loglik_evidence: float | None
    per_draw: tuple = field(default=())


def _obs(series) -> np.ndarray:
    if isinstance(series, LabeledSeries):
        return series.obs
    obs = np.asarray(series, dtype=float)
    return obs[:, None] if obs.ndim == 1 else obs


def _check(obs: np.ndarray, params: Params, spec: ModelSpec) -> None:
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise ModelError("series must be a non-empty (T, dim) matrix")
    if obs.shape[1] != spec.obs_dim or params.obs_dim != spec.obs_dim:
        raise ModelError("observation dimension mismatch")
    if params.n_states != spec.n_states or params.ar_order != spec.ar_order:
        raise ModelError("params do not match model spec")


# ---------------------------------------------------------------------------
# HMM
# ---------------------------------------------------------------------------


def fb_hmm(series, params: Params, spec: ModelSpec, log_terminal=None,
           log_emissions: np.ndarray | None = None) -> ForwardBackwardTables:
    """Forward-backward for an (AR-)HMM.

    ``log_terminal`` optionally weights the state at T (log beta_T); an HSMM
    with geometric sojourns equals an HMM with log_terminal = log(1 - gamma_jj).
    """
    obs = _obs(series)
    _check(obs, params, spec)
    L = emission_loglik(params, obs) if log_emissions is None else log_emissions
    T, J = L.shape
    logG = _safe_log(params.tpm)
    la = np.empty((T, J))
    lb = np.empty((T, J))
    la[0] = _safe_log(params.delta) + L[0]
    for t in range(1, T):
        la[t] = L[t] + _lse(la[t - 1][:, None] + logG, axis=0)
    lb[T - 1] = 0.0 if log_terminal is None else log_terminal
    for t in range(T - 2, -1, -1):
        lb[t] = _lse(logG + (L[t + 1] + lb[t + 1])[None, :], axis=1)
    log_xi = la + lb
    log_ev = float(logsumexp(log_xi[-1]))
    return ForwardBackwardTables(la, lb, np.full((T, J), np.nan), log_xi, log_ev)


def viterbi_hmm(series, params: Params, spec: ModelSpec, log_terminal=None,
                log_emissions: np.ndarray | None = None) -> np.ndarray:
    """Most probable state path of an (AR-)HMM; ties go to the lowest state."""
    obs = _obs(series)
    _check(obs, params, spec)
    L = emission_loglik(params, obs) if log_emissions is None else log_emissions
    T, J = L.shape
    logG = _safe_log(params.tpm)
    psi = np.empty((T, J))
    back = np.zeros((T, J), dtype=np.int64)
    psi[0] = _safe_log(params.delta) + L[0]
    for t in range(1, T):
        cand = psi[t - 1][:, None] + logG
        back[t] = np.argmax(cand, axis=0)
        psi[t] = cand[back[t], np.arange(J)] + L[t]
    last = psi[-1] if log_terminal is None else psi[-1] + log_terminal
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(last))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


# ---------------------------------------------------------------------------
# HSMM
# ---------------------------------------------------------------------------


def _hsmm_inputs(series, params, spec, max_duration, budget, log_emissions):
    obs = _obs(series)
    _check(obs, params, spec)
    if not spec.is_hsmm:
        raise ModelError("HSMM decoder called with an HMM spec")
    L = emission_loglik(params, obs) if log_emissions is None else log_emissions
    T, J = L.shape
    logd = duration_log_pmf(params, spec, T, max_duration=max_duration)
    D = logd.shape[1]
    if T * D * J * J > budget:
        raise ModelError(f"T*D*J^2 = {T * D * J * J:.3g} exceeds the decode budget {budget:.3g}")
    S = np.zeros((T + 1, J))
    np.cumsum(L, axis=0, out=S[1:])
    logG = _safe_log(params.tpm)
    return T, J, D, logd, S, logG


def fb_hsmm(series, params: Params, spec: ModelSpec, max_duration: int | None = None,
            budget: float = DEFAULT_BUDGET,
            log_emissions: np.ndarray | None = None) -> ForwardBackwardTables:
    """Forward-backward for an (AR-)HSMM with explicit sojourn distributions.

    Marginals follow the backward-in-time recursion
    xi_t = xi_{t+1} + alpha_t * beta_t - alpha*_t * beta*_t with
    xi_T = alpha_T, evaluated on posterior-normalized run-end and run-start
    probabilities so that the subtraction stays in [0, 1].
    """
    T, J, D, logd, S, logG = _hsmm_inputs(series, params, spec, max_duration, budget, log_emissions)
    logdT = logd.T  # (D, J)

    # forward: astar[s] = log Pr(X_{1:s}, run starts at s+1 in state j)
    alpha = np.full((T + 1, J), -np.inf)
    astar = np.full((T + 1, J), -np.inf)
    astar[0] = _safe_log(params.delta)
    shifted = astar - S  # astar[s] - S[s], updated as astar fills in
    for t in range(1, T + 1):
        dm = min(D, t)
        prev = shifted[t - dm:t][::-1]  # rows d = 1..dm  <->  s = t - d
        alpha[t] = S[t] + _lse(prev + logdT[:dm], axis=0)
        if t < T:
            astar[t] = _lse(alpha[t][:, None] + logG, axis=0)
            shifted[t] = astar[t] - S[t]

    # backward: beta[T] = 0; bstar[t] = sum_d d_j(d) f_j(x_{t+1:t+d}) beta[t+d]
    beta = np.full((T + 1, J), -np.inf)
    bstar = np.full((T + 1, J), -np.inf)
    beta[T] = 0.0
    fwd = beta + S
    for t in range(T - 1, -1, -1):
        dm = min(D, T - t)
        nxt = fwd[t + 1:t + 1 + dm]  # rows d = 1..dm
        bstar[t] = _lse(nxt + logdT[:dm], axis=0) - S[t]
        if t >= 1:
            beta[t] = _lse(logG + bstar[t][None, :], axis=1)
            fwd[t] = beta[t] + S[t]

    log_ev = float(logsumexp(alpha[T]))

    # marginals via run-end minus run-start probabilities
    with np.errstate(invalid="ignore"):
        end = np.exp(alpha[1:] + beta[1:] - log_ev)          # end[t-1]: run ends at t
        start = np.exp(astar[1:T] + bstar[1:T] - log_ev)     # start[t-1]: run starts at t+1
    end = np.nan_to_num(end)
    start = np.nan_to_num(start)
    xi = np.empty((T, J))
    xi[T - 1] = end[T - 1]
    for t in range(T - 2, -1, -1):
        xi[t] = xi[t + 1] + end[t] - start[t]
    np.clip(xi, 0.0, None, out=xi)
    log_xi = _safe_log(xi) + log_ev

    # row t-1 holds quantities at time t; beta*_T (no remaining data) is -inf
    return ForwardBackwardTables(alpha[1:], beta[1:], bstar[1:], log_xi, log_ev)


def viterbi_hsmm(series, params: Params, spec: ModelSpec, max_duration: int | None = None,
                 budget: float = DEFAULT_BUDGET,
                 log_emissions: np.ndarray | None = None) -> np.ndarray:
    """Most probable state path of an (AR-)HSMM.

    psi_t(j, d) = max_{i != j} V_{t-d}(i) gamma_ij d_j(d) f_j(x_{t-d+1:t}),
    where V_s(i) = max_d' psi_s(i, d'). Backpointers are stored per cell.
    Ties: lowest state, then lowest duration.
    """
    T, J, D, logd, S, logG = _hsmm_inputs(series, params, spec, max_duration, budget, log_emissions)
    logdT = logd.T
    V = np.full((T + 1, J), -np.inf)
    best_d = np.zeros((T + 1, J), dtype=np.int64)
    vstar = np.full((T + 1, J), -np.inf)
    vstar_arg = np.full((T + 1, J), -1, dtype=np.int64)
    vstar[0] = _safe_log(params.delta)
    shifted = vstar - S
    cols = np.arange(J)
    for t in range(1, T + 1):
        dm = min(D, t)
        psi = shifted[t - dm:t][::-1] + logdT[:dm] + S[t]  # (dm, J)
        k = np.argmax(psi, axis=0)
        best_d[t] = k + 1
        V[t] = psi[k, cols]
        if t < T:
            cand = V[t][:, None] + logG
            vstar_arg[t] = np.argmax(cand, axis=0)
            vstar[t] = cand[vstar_arg[t], cols]
            shifted[t] = vstar[t] - S[t]

    path = np.empty(T, dtype=np.int64)
    t = T
    j = int(np.argmax(V[T]))
    while t > 0:
        d = int(best_d[t, j])
        path[t - d:t] = j
        t -= d
        if t > 0:
            j = int(vstar_arg[t, j])
    return path


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def forward_backward(series, params: Params, spec: ModelSpec, **kw) -> ForwardBackwardTables:
    return fb_hsmm(series, params, spec, **kw) if spec.is_hsmm else fb_hmm(series, params, spec, **kw)


def viterbi(series, params: Params, spec: ModelSpec, **kw) -> np.ndarray:
    return viterbi_hsmm(series, params, spec, **kw) if spec.is_hsmm else viterbi_hmm(series, params, spec, **kw)


def _decode_one(series, params, spec, mode, **kw) -> DecodeResult:
    probs = lpath = gpath = ev = None
    if mode in ("local", "both"):
        tables = forward_backward(series, params, spec, **kw)
        probs = tables.marginals
        probs = probs / probs.sum(axis=1, keepdims=True)
        lpath = np.argmax(probs, axis=1)
        ev = tables.log_evidence
    if mode in ("global", "both"):
        gpath = viterbi(series, params, spec, **kw)
    return DecodeResult(probs, lpath, gpath, ev)


def decode(series, draws_or_params, spec: ModelSpec, mode: str = "both", **kw) -> DecodeResult:
    """Decode one series with a single parameter set or a set of posterior draws.

    ``mode`` is "local", "global" or "both". Extra keywords go to the
    underlying decoders (e.g. ``max_duration``).
    """
    if mode not in ("local", "global", "both"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if isinstance(draws_or_params, Params):
        return _decode_one(series, draws_or_params, spec, mode, **kw)
    draws = list(getattr(draws_or_params, "draws", draws_or_params))
    if not draws:
        raise ModelError("no posterior draws to decode with")
    results = tuple(_decode_one(series, p, spec, mode, **kw) for p in draws)
    probs = lpath = gpath = ev = None
    if mode in ("local", "both"):
        probs = np.mean([r.local_probs for r in results], axis=0)
        lpath = np.argmax(probs, axis=1)
        evs = np.array([r.loglik_evidence for r in results])
        ev = float(logsumexp(evs) - np.log(len(evs)))
    if mode in ("global", "both"):
        paths = np.array([r.global_path for r in results])
        counts = np.stack([(paths == j).sum(axis=0) for j in range(spec.n_states)], axis=1)
        gpath = np.argmax(counts, axis=1)
    return DecodeResult(probs, lpath, gpath, ev, per_draw=results)


def embedded_hmm(params: Params, spec: ModelSpec) -> tuple[Params, ModelSpec, np.ndarray]:
    """HMM equivalent of an HSMM with geometric sojourns.

    Returns (hmm_params, hmm_spec, log_terminal). The HMM stays in j with the
    geometric stay probability and otherwise moves according to the HSMM
    conditional t.p.m.; ``log_terminal`` = log(1 - stay_j) supplies the
    forced switch after T.
    """
    from .model import Family, Geometric, sojourn_dists

    dists = sojourn_dists(params, spec)
    if not all(isinstance(d, Geometric) for d in dists):
        raise ModelError("embedding needs geometric sojourn distributions")
    stay = np.array([d.stay for d in dists])
    G = (1.0 - stay)[:, None] * params.tpm
    G[np.diag_indices_from(G)] = stay
    hmm = Params(delta=params.delta, tpm=G, means=params.means, variances=params.variances,
                 ar_coeffs=params.ar_coeffs)
    hspec = ModelSpec(family=Family.HMM, n_states=spec.n_states, obs_dim=spec.obs_dim,
                      ar_order=spec.ar_order)
    return hmm, hspec, np.log1p(-stay)
