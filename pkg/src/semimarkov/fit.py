"""Supervised Bayesian fitting from labelled series.

With labels known, the posterior factorizes into independent blocks:
Dirichlet rows of the t.p.m. and the initial distribution (sampled
exactly), one emission block per (state, dimension) and one sojourn block
per state. The non-conjugate blocks are sampled with an adaptive
random-walk Metropolis on an unconstrained scale (log for positive
parameters) whose proposal covariance starts from the inverse Hessian at
the block's mode.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import digamma

from .model import (
    LOG_2PI,
    LabeledSeries,
    ModelError,
    ModelSpec,
    Params,
    Priors,
    SojournFamily,
    nb_logpmf,
    runs,
)
from .simulate import make_rng


class EmptyStateWarning(UserWarning):
    """A state has no data in the training set; its block uses the prior."""


class FitError(RuntimeError):
    """Optimizer failed; carries the best iterate and its gradient norm."""

    def __init__(self, message, best=None, grad_norm=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class SamplerConfig:
    burn_in: int = 1000
    thin: int = 1
    target_accept: float = 0.35

    def to_dict(self) -> dict:
        return {"burn_in": self.burn_in, "thin": self.thin, "target_accept": self.target_accept}


# ---------------------------------------------------------------------------
# Sufficient statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SufficientStats:
    """Counts and per-state data extracted from labelled series.

    ``transitions[j, i]`` counts steps from j to i; the diagonal holds the
    absorbing (self) steps, used by HMMs and ignored by HSMMs.
    ``targets[j]`` (n_j, dim) are the observations labelled j from t >= p,
    ``lags[j]`` (n_j, p, dim) their lagged values (lag 1 first).
    """

    transitions: np.ndarray
    initial: np.ndarray
    sojourns: tuple
    targets: tuple
    lags: tuple
    n_series: int

    @property
    def nat_transitions(self) -> np.ndarray:
        out = self.transitions.copy()
        np.fill_diagonal(out, 0)
        return out


def sufficient_stats(series_set, spec: ModelSpec) -> SufficientStats:
    series_set = [series_set] if isinstance(series_set, LabeledSeries) else list(series_set)
    J, p, dim = spec.n_states, spec.ar_order, spec.obs_dim
    trans = np.zeros((J, J), dtype=np.int64)
    init = np.zeros(J, dtype=np.int64)
    soj = [[] for _ in range(J)]
    tg = [[] for _ in range(J)]
    lg = [[] for _ in range(J)]
    for s in series_set:
        s.check_labels(J)
        if s.obs.shape[1] != dim:
            raise ModelError("observation dimension does not match spec")
        c = s.labels
        init[c[0]] += 1
        np.add.at(trans, (c[:-1], c[1:]), 1)
        states, lengths = runs(c)
        for j, u in zip(states, lengths):
            soj[j].append(int(u))
        T = len(s)
        if T > p:
            idx = np.arange(p, T)
            lagmat = np.stack([s.obs[idx - k] for k in range(1, p + 1)], axis=1) if p else np.zeros((idx.size, 0, dim))
            for j in range(J):
                m = c[idx] == j
                tg[j].append(s.obs[idx[m]])
                lg[j].append(lagmat[m])
    targets = tuple(np.concatenate(t) if t else np.zeros((0, dim)) for t in tg)
    lags = tuple(np.concatenate(l) if l else np.zeros((0, p, dim)) for l in lg)
    return SufficientStats(trans, init, tuple(np.array(u, dtype=np.int64) for u in soj),
                           targets, lags, len(series_set))


def dirichlet_posteriors(stats_: SufficientStats, priors: Priors, spec: ModelSpec):
    """Posterior Dirichlet concentrations (tpm rows, delta).

    For HSMMs the diagonal is outside the support and is returned as 0.
    """
    tpm = priors.tpm_concentration + stats_.transitions
    if spec.is_hsmm:
        tpm = priors.tpm_concentration + stats_.nat_transitions
        np.fill_diagonal(tpm, 0.0)
    return np.asarray(tpm, dtype=float), priors.delta_concentration + stats_.initial


def dirichlet_mode(alpha: np.ndarray) -> np.ndarray:
    """Mode of a Dirichlet; falls back to the mean when no entry exceeds 1."""
    b = np.maximum(np.asarray(alpha, dtype=float) - 1.0, 0.0)
    if b.sum() > 0:
        return b / b.sum()
    return alpha / alpha.sum()


def _tpm_from_rows(conc: np.ndarray, spec: ModelSpec, row_fn) -> np.ndarray:
    J = spec.n_states
    G = np.zeros((J, J))
    for j in range(J):
        if spec.is_hsmm:
            if J == 1:
                continue
            off = np.arange(J) != j
            G[j, off] = row_fn(conc[j, off])
        else:
            G[j] = row_fn(conc[j])
    return G


# ---------------------------------------------------------------------------
# Block log posteriors (value and gradient)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmissionBlock:
    """Regression statistics for one (state, dimension) emission block.

    Parameters are theta = (intercept, ar_1..ar_p, log sd).
    """

    n: int
    ztz: np.ndarray
    zty: np.ndarray
    yty: float
    prior_loc: np.ndarray    # for (intercept, ar_1..ar_p)
    prior_scale: np.ndarray
    sd_loc: float
    sd_scale: float

    @classmethod
    def build(cls, y, lags, mean_loc, mean_scale, ar_loc, ar_scale, sd_loc, sd_scale):
        Z = np.column_stack([np.ones(y.size), lags]) if y.size else np.zeros((0, 1 + lags.shape[1]))
        return cls(
            n=int(y.size), ztz=Z.T @ Z, zty=Z.T @ y, yty=float(y @ y),
            prior_loc=np.concatenate(([mean_loc], ar_loc)),
            prior_scale=np.concatenate(([mean_scale], ar_scale)),
            sd_loc=float(sd_loc), sd_scale=float(sd_scale),
        )

    def logpost(self, theta, jacobian=True):
        beta, s = theta[:-1], theta[-1]
        var = math.exp(2.0 * s)
        sd = math.exp(s)
        ztzb = self.ztz @ beta
        ssr = max(self.yty - 2.0 * beta @ self.zty + beta @ ztzb, 0.0)
        z = (beta - self.prior_loc) / self.prior_scale
        val = (-0.5 * self.n * LOG_2PI - self.n * s - 0.5 * ssr / var
               - 0.5 * z @ z - 0.5 * ((sd - self.sd_loc) / self.sd_scale) ** 2)
        g_beta = (self.zty - ztzb) / var - z / self.prior_scale
        g_s = -self.n + ssr / var - (sd - self.sd_loc) * sd / self.sd_scale ** 2
        if jacobian:
            val += s
            g_s += 1.0
        return val, np.concatenate((g_beta, [g_s]))

    def start(self) -> np.ndarray:
        k = self.ztz.shape[0]
        if self.n > k:
            beta = np.linalg.lstsq(self.ztz + 1e-12 * np.eye(k), self.zty, rcond=None)[0]
            ssr = max(self.yty - 2 * beta @ self.zty + beta @ self.ztz @ beta, 1e-12)
            return np.concatenate((beta, [0.5 * math.log(ssr / self.n)]))
        return np.concatenate((self.prior_loc, [math.log(max(self.sd_loc, 0.0) + self.sd_scale)]))


@dataclass(frozen=True)
class SojournBlock:
    """Run lengths of one state; theta = (log m, log k) or (log m,) for geometric."""

    lengths: np.ndarray
    log_loc: np.ndarray
    log_scale: np.ndarray
    geometric: bool = False

    def logpost(self, theta, jacobian=True):
        y = self.lengths - 1.0
        m = math.exp(theta[0])
        k = 1.0 if self.geometric else math.exp(theta[1])
        val = float(np.sum(nb_logpmf(y, m, k)))
        gm = float(np.sum(y - m * (y + k) / (k + m)))
        grads = [gm]
        if not self.geometric:
            gk = k * float(np.sum(digamma(y + k) - digamma(k) + math.log(k / (k + m)) + 1.0 - (y + k) / (k + m)))
            grads.append(gk)
        g = np.array(grads)
        z = (np.asarray(theta) - self.log_loc[: len(theta)]) / self.log_scale[: len(theta)]
        val += -0.5 * float(z @ z)
        g = g - z / self.log_scale[: len(theta)]
        if not jacobian:
            # log-normal density on the natural scale carries -log x
            val -= float(np.sum(theta))
            g = g - 1.0
        return val, g

    def start(self) -> np.ndarray:
        y = self.lengths - 1.0
        if y.size == 0:
            return self.log_loc[: 1 if self.geometric else 2].copy()
        mean = max(float(y.mean()), 0.05)
        if self.geometric:
            return np.array([math.log(mean)])
        var = float(y.var())
        k = mean ** 2 / (var - mean) if var > mean else 50.0
        return np.array([math.log(mean), math.log(min(max(k, 0.05), 1e3))])


def _emission_blocks(stats_: SufficientStats, priors: Priors, spec: ModelSpec):
    blocks = {}
    for j in range(spec.n_states):
        for k in range(spec.obs_dim):
            blocks[(j, k)] = EmissionBlock.build(
                stats_.targets[j][:, k], stats_.lags[j][:, :, k],
                priors.mean_loc[j, k], priors.mean_scale[j, k],
                priors.ar_loc[j, :, k], priors.ar_scale[j, :, k],
                priors.sd_loc[j, k], priors.sd_scale[j, k],
            )
    return blocks


def _sojourn_blocks(stats_: SufficientStats, priors: Priors, spec: ModelSpec):
    if not spec.is_hsmm:
        return {}
    geo = spec.sojourn_family is SojournFamily.GEOMETRIC
    return {j: SojournBlock(stats_.sojourns[j].astype(float), priors.sojourn_log_loc[j],
                            priors.sojourn_log_scale[j], geometric=geo)
            for j in range(spec.n_states)}


def maximize_block(block, jacobian=False, x0=None, gtol=1e-9):
    """Quasi-Newton maximization of a block log posterior."""
    x0 = block.start() if x0 is None else x0

    def neg(x):
        v, g = block.logpost(x, jacobian=jacobian)
        if not np.isfinite(v):
            return 1e300, np.zeros_like(x)
        return -v, -g

    res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B",
                            options={"gtol": gtol, "ftol": 1e-15, "maxiter": 5000})
    _, g = block.logpost(res.x, jacobian=jacobian)
    gnorm = float(np.linalg.norm(g))
    scale = 1.0 + abs(res.fun)
    if not (res.success or gnorm <= 1e-5 * scale) or not np.all(np.isfinite(res.x)):
        raise FitError(f"block optimization did not converge: {res.message}", best=res.x, grad_norm=gnorm)
    return res.x


def _numerical_hessian(block, x, jacobian=True, h=1e-5):
    d = x.size
    H = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        H[:, i] = (block.logpost(x + e, jacobian)[1] - block.logpost(x - e, jacobian)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def _proposal_cov(block, x):
    H = _numerical_hessian(block, x)
    try:
        cov = np.linalg.inv(-H)
        np.linalg.cholesky(cov)
        if np.all(np.isfinite(cov)):
            return cov
    except np.linalg.LinAlgError:
        pass
    d = np.abs(np.diag(H))
    return np.diag(1.0 / np.where(np.isfinite(d), np.maximum(d, 1e-6), 1e6))


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis
# ---------------------------------------------------------------------------


def adaptive_rwm(logp, x0, cov, n_keep, burn_in, thin, target, rng):
    """Random-walk Metropolis with Robbins-Monro scale adaptation.

    The proposal is N(x, s^2 cov); log s moves by (accept_prob - target)
    with gain (i+1)^-0.6 during burn-in and is frozen afterwards.
    Returns (samples (n_keep, d), diagnostics dict).
    """
    x = np.array(x0, dtype=float)
    d = x.size
    chol = np.linalg.cholesky(cov)
    log_s = math.log(2.38 / math.sqrt(d))
    lp = logp(x)
    if not np.isfinite(lp):
        raise FitError("non-finite log posterior at sampler initialization", best=x)
    n_iter = burn_in + n_keep * thin
    out = np.empty((n_keep, d))
    acc_burn = acc_post = 0
    kept = 0
    z = rng.standard_normal((n_iter, d))
    logu = np.log(rng.random(n_iter))
    for i in range(n_iter):
        prop = x + math.exp(log_s) * (chol @ z[i])
        lpp = logp(prop)
        a = lpp - lp if np.isfinite(lpp) else -np.inf
        accepted = logu[i] < a
        if accepted:
            x, lp = prop, lpp
        if i < burn_in:
            acc_burn += accepted
            log_s += (min(1.0, math.exp(min(a, 0.0))) - target) / (i + 1) ** 0.6
        else:
            acc_post += accepted
            if (i - burn_in + 1) % thin == 0:
                out[kept] = x
                kept += 1
    diag = {
        "acceptance": float(acc_post / max(n_iter - burn_in, 1)),
        "burn_in_acceptance": float(acc_burn / burn_in) if burn_in else None,
        "proposal_scale": math.exp(log_s),
    }
    return out, diag


# ---------------------------------------------------------------------------
# Public fitting API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PosteriorDraws:
    draws: tuple
    spec: ModelSpec
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.draws)

    def __iter__(self):
        return iter(self.draws)

    def __len__(self):
        return len(self.draws)

    def stack(self, name: str) -> np.ndarray:
        """Array of one parameter across draws, shape (n_draws, ...)."""
        return np.stack([getattr(p, name) for p in self.draws])


def _check_durations(stats_: SufficientStats, spec: ModelSpec):
    if spec.is_hsmm and spec.max_duration is not None:
        longest = max((u.max() for u in stats_.sojourns if u.size), default=0)
        if longest > spec.max_duration:
            raise ModelError(f"labelled run of length {longest} exceeds max_duration {spec.max_duration}")


def _prior_emission_draw(block: EmissionBlock, n, rng):
    beta = rng.normal(block.prior_loc, block.prior_scale, size=(n, block.prior_loc.size))
    a = (0.0 - block.sd_loc) / block.sd_scale
    sd = stats.truncnorm.rvs(a, np.inf, loc=block.sd_loc, scale=block.sd_scale, size=n, random_state=rng)
    return np.column_stack([beta, np.log(sd)])


def sample_posterior(series_set, priors: Priors, spec: ModelSpec, n_draws: int, seed: int,
                     config: SamplerConfig | None = None) -> PosteriorDraws:
    """Draw ``n_draws`` parameter sets from the joint posterior.

    Blocks are independent given the labels, and each block gets its own
    random stream derived from ``seed``, so the result does not depend on
    block order.
    """
    config = config or SamplerConfig()
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    st = sufficient_stats(series_set, spec)
    _check_durations(st, spec)
    J, p, dim = spec.n_states, spec.ar_order, spec.obs_dim

    rng0 = make_rng(seed, 0)
    tpm_conc, delta_conc = dirichlet_posteriors(st, priors, spec)
    deltas = rng0.dirichlet(delta_conc, size=n_draws)
    tpms = np.zeros((n_draws, J, J))
    for j in range(J):
        if spec.is_hsmm:
            if J > 1:
                off = np.arange(J) != j
                tpms[:, j, off] = rng0.dirichlet(tpm_conc[j, off], size=n_draws)
        else:
            tpms[:, j] = rng0.dirichlet(tpm_conc[j], size=n_draws)

    diagnostics = {"emission": {}, "sojourn": {}, "config": config.to_dict(), "seed": seed}
    means = np.zeros((n_draws, J, dim))
    ar = np.zeros((n_draws, J, p, dim))
    var = np.zeros((n_draws, J, dim))
    for (j, k), block in _emission_blocks(st, priors, spec).items():
        rng = make_rng(seed, 1, j, k)
        name = f"state{j + 1}_dim{k + 1}"
        if block.n == 0:
            warnings.warn(f"state {j + 1} has no observations; emission drawn from the prior",
                          EmptyStateWarning, stacklevel=2)
            sample = _prior_emission_draw(block, n_draws, rng)
            diagnostics["emission"][name] = {"prior_only": True}
        else:
            x0 = maximize_block(block, jacobian=True)
            cov = _proposal_cov(block, x0)
            sample, diag = adaptive_rwm(lambda th, b=block: b.logpost(th)[0], x0, cov, n_draws,
                                        config.burn_in, config.thin, config.target_accept, rng)
            diagnostics["emission"][name] = diag
        means[:, j, k] = sample[:, 0]
        ar[:, j, :, k] = sample[:, 1:1 + p]
        var[:, j, k] = np.exp(2.0 * sample[:, -1])

    soj_m = soj_k = None
    if spec.is_hsmm:
        soj_m = np.zeros((n_draws, J))
        soj_k = np.ones((n_draws, J))
        for j, block in _sojourn_blocks(st, priors, spec).items():
            rng = make_rng(seed, 2, j)
            name = f"state{j + 1}"
            d = 1 if block.geometric else 2
            if block.lengths.size == 0:
                warnings.warn(f"state {j + 1} has no runs; sojourn drawn from the prior",
                              EmptyStateWarning, stacklevel=2)
                sample = rng.normal(block.log_loc[:d], block.log_scale[:d], size=(n_draws, d))
                diagnostics["sojourn"][name] = {"prior_only": True}
            else:
                x0 = maximize_block(block, jacobian=True)
                cov = _proposal_cov(block, x0)
                sample, diag = adaptive_rwm(lambda th, b=block: b.logpost(th)[0], x0, cov, n_draws,
                                            config.burn_in, config.thin, config.target_accept, rng)
                diagnostics["sojourn"][name] = diag
            soj_m[:, j] = np.exp(sample[:, 0])
            if d == 2:
                soj_k[:, j] = np.exp(sample[:, 1])

    draws = tuple(
        Params(delta=deltas[n], tpm=tpms[n], means=means[n], variances=var[n], ar_coeffs=ar[n],
               sojourn_mean=None if soj_m is None else soj_m[n],
               sojourn_dispersion=None if soj_k is None else soj_k[n])
        for n in range(n_draws)
    )
    return PosteriorDraws(draws=draws, spec=spec, diagnostics=diagnostics)


def map_fit(series_set, priors: Priors, spec: ModelSpec) -> Params:
    """Posterior mode on the natural parameter scale.

    Dirichlet blocks use their closed-form modes; emission and sojourn
    blocks are maximized with L-BFGS on log-transformed positives.
    Raises :class:`FitError` when an optimizer fails to converge.
    """
    st = sufficient_stats(series_set, spec)
    _check_durations(st, spec)
    J, p, dim = spec.n_states, spec.ar_order, spec.obs_dim
    tpm_conc, delta_conc = dirichlet_posteriors(st, priors, spec)
    delta = dirichlet_mode(delta_conc)
    tpm = _tpm_from_rows(tpm_conc, spec, dirichlet_mode)

    means = np.zeros((J, dim))
    ar = np.zeros((J, p, dim))
    var = np.zeros((J, dim))
    for (j, k), block in _emission_blocks(st, priors, spec).items():
        if block.n == 0:
            # the sd prior peaks at the boundary; use prior means instead
            warnings.warn(f"state {j + 1} has no observations; emission set from the prior",
                          EmptyStateWarning, stacklevel=2)
            a = (0.0 - block.sd_loc) / block.sd_scale
            sd = stats.truncnorm.mean(a, np.inf, loc=block.sd_loc, scale=block.sd_scale)
            x = np.concatenate((block.prior_loc, [math.log(sd)]))
        else:
            x = maximize_block(block, jacobian=False)
        means[j, k], ar[j, :, k], var[j, k] = x[0], x[1:1 + p], math.exp(2 * x[-1])
    soj_m = soj_k = None
    if spec.is_hsmm:
        soj_m, soj_k = np.zeros(J), np.ones(J)
        for j, block in _sojourn_blocks(st, priors, spec).items():
            x = maximize_block(block, jacobian=False)
            soj_m[j] = math.exp(x[0])
            if not block.geometric:
                soj_k[j] = math.exp(x[1])
    return Params(delta=delta, tpm=tpm, means=means, variances=var, ar_coeffs=ar,
                  sojourn_mean=soj_m, sojourn_dispersion=soj_k)
