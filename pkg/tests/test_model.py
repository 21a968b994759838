import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from semimarkov import io
from semimarkov.model import (
    IMPOSSIBLE,
    LOG_2PI,
    Family,
    Geometric,
    LabeledSeries,
    ModelError,
    ModelSpec,
    NegBinomial,
    Params,
    Priors,
    SojournFamily,
    complete_data_loglik,
    covering_duration,
    duration_log_pmf,
    emission_logpdf,
    emission_loglik,
    log_posterior,
    log_prior,
    runs,
    sojourn_pmf,
    truncated_log_pmf,
)

HSMM2 = ModelSpec(family=Family.HSMM, n_states=2, obs_dim=1, ar_order=0,
                  sojourn_family=SojournFamily.NEGBINOMIAL)


def hsmm2_params(**kw):
    base = dict(delta=[0.3, 0.7], tpm=[[0, 1], [1, 0]], means=[[0.0], [2.0]], variances=[[1.0], [0.5]],
                sojourn_mean=[3.0, 5.0], sojourn_dispersion=[2.0, 0.7])
    base.update(kw)
    return Params(**base)


# -- sojourn distributions ---------------------------------------------------


def test_nb_with_unit_dispersion_at_one():
    assert sojourn_pmf(NegBinomial(2.0, 1.0), 1) == pytest.approx(1 / 3, abs=1e-14)


def test_geometric_at_one():
    assert sojourn_pmf(Geometric(0.5), 1) == pytest.approx(0.5, abs=1e-15)


def test_nb_closed_form_and_monte_carlo():
    # shifted NB(m=2, k=2) at u=2 is NB at y=1 with p = k/(k+m) = 1/2:
    # C(y+k-1, y) p^k (1-p)^y = 2 * 1/4 * 1/2
    closed = math.comb(1 + 2 - 1, 1) * 0.5 ** 2 * 0.5 ** 1
    assert closed == 0.25
    assert sojourn_pmf(NegBinomial(2.0, 2.0), 2) == pytest.approx(closed, abs=1e-14)
    draws = NegBinomial(2.0, 2.0).sample(np.random.default_rng(1), size=10**6)
    freq = np.mean(draws == 2)
    se = math.sqrt(0.25 * 0.75 / 10**6)
    assert abs(freq - 0.25) < 4 * se


@pytest.mark.parametrize("u", [0, -1, 1.5])
def test_sojourn_domain(u):
    with pytest.raises(ModelError):
        sojourn_pmf(NegBinomial(2.0, 2.0), u)


@pytest.mark.parametrize("bad", [dict(mean=0.0, dispersion=1.0), dict(mean=1.0, dispersion=-1.0)])
def test_nb_invalid_parameters(bad):
    with pytest.raises(ModelError):
        NegBinomial(**bad)


def test_geometric_invalid():
    with pytest.raises(ModelError):
        Geometric(1.0)


@given(m=st.floats(0.01, 500.0))
def test_nb_unit_dispersion_is_geometric(m):
    u = np.arange(1, 51)
    nb = np.exp(NegBinomial(m, 1.0).logpmf(u))
    geo = np.exp(Geometric(m / (m + 1.0)).logpmf(u))
    np.testing.assert_allclose(nb, geo, rtol=0, atol=1e-12)


@given(m=st.floats(0.05, 200.0), k=st.floats(0.05, 200.0))
@settings(max_examples=50)
def test_truncated_pmf_renormalizes(m, k):
    dist = NegBinomial(m, k)
    D = covering_duration(dist, 1 - 1e-6)
    lp = truncated_log_pmf(dist, D)
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12
    assert np.exp(dist.logpmf(np.arange(1, D + 1))).sum() >= 1 - 1e-6


def test_nb_matches_scipy():
    u = np.arange(1, 40)
    np.testing.assert_allclose(np.exp(NegBinomial(7.0, 3.0).logpmf(u)),
                               stats.nbinom.pmf(u - 1, 3.0, 3.0 / 10.0), rtol=1e-12)


def test_duration_table_shapes():
    p = hsmm2_params()
    tab = duration_log_pmf(p, HSMM2, T=10)
    assert tab.shape[0] == 2 and tab.shape[1] <= 10
    tab5 = duration_log_pmf(p, HSMM2, T=10, max_duration=5)
    np.testing.assert_allclose(np.exp(tab5).sum(axis=1), 1.0, atol=1e-12)
    # D >= T keeps the raw pmf (no renormalization)
    raw = duration_log_pmf(p, HSMM2, T=4, max_duration=9)
    np.testing.assert_allclose(raw[0], NegBinomial(3.0, 2.0).logpmf(np.arange(1, 5)))


# -- spec and params ----------------------------------------------------------


def test_hmm_spec_forces_geometric():
    s = ModelSpec(family="HMM", n_states=3, sojourn_family="NegBinomial", max_duration=7)
    assert s.sojourn_family is SojournFamily.GEOMETRIC
    assert s.max_duration is None


def test_params_validation():
    hsmm2_params().validate(HSMM2)
    with pytest.raises(ModelError):
        hsmm2_params(tpm=[[0.5, 0.5], [1, 0]]).validate(HSMM2)
    with pytest.raises(ModelError):
        hsmm2_params(variances=[[1.0], [0.0]]).validate(HSMM2)
    with pytest.raises(ModelError):
        hsmm2_params(delta=[0.3, 0.6]).validate(HSMM2)
    with pytest.raises(ModelError):
        hsmm2_params(sojourn_mean=[3.0, -1.0]).validate(HSMM2)


def test_labeled_series_checks():
    with pytest.raises(ModelError):
        LabeledSeries(obs=np.zeros((0, 1)))
    with pytest.raises(ModelError):
        LabeledSeries(obs=np.zeros(3), labels=[0, 1])
    s = LabeledSeries(obs=np.zeros(3), labels=[0, 1, 2])
    with pytest.raises(ModelError):
        s.check_labels(2)


def test_runs():
    states, lengths = runs(np.array([0, 0, 1, 1, 1, 0]))
    assert states.tolist() == [0, 1, 0] and lengths.tolist() == [2, 3, 1]


# -- emissions -----------------------------------------------------------------


def test_emission_standard_normal_at_mode():
    p = Params(delta=[1.0], tpm=[[1.0]], means=[[0.0]], variances=[[1.0]])
    assert emission_logpdf(p, 0, [0.0]) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)


def test_emission_ar1_at_conditional_mean():
    p = Params(delta=[1.0], tpm=[[1.0]], means=[[1.0]], variances=[[1.0]], ar_coeffs=[[[0.5]]])
    assert emission_logpdf(p, 0, [[2.0], [2.0]]) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)


def test_emission_diagonal_is_sum_of_univariate():
    mu, var, x = np.array([0.5, -1.0, 2.0]), np.array([0.3, 2.0, 1.5]), np.array([0.1, 0.2, 0.3])
    p = Params(delta=[1.0], tpm=[[1.0]], means=[mu], variances=[var])
    expected = sum(stats.norm.logpdf(x[k], mu[k], math.sqrt(var[k])) for k in range(3))
    assert emission_logpdf(p, 0, x[None, :]) == pytest.approx(expected, abs=1e-12)


def test_emission_window_length_checked():
    p = Params(delta=[1.0], tpm=[[1.0]], means=[[1.0]], variances=[[1.0]], ar_coeffs=[[[0.5]]])
    with pytest.raises(ModelError):
        emission_logpdf(p, 0, [[2.0]])


def test_zero_ar_matches_independent_model(rng):
    obs = rng.normal(size=(20, 2))
    base = dict(delta=[0.5, 0.5], tpm=[[0.9, 0.1], [0.2, 0.8]], means=[[0, 1], [2, 3]],
                variances=[[1, 2], [0.5, 1]])
    p0 = Params(**base)
    p2 = Params(**base, ar_coeffs=np.zeros((2, 2, 2)))
    np.testing.assert_allclose(emission_loglik(p2, obs)[2:], emission_loglik(p0, obs)[2:], rtol=1e-15)


# -- complete-data likelihood ----------------------------------------------------


def test_single_state_single_step():
    spec = ModelSpec(family="HMM", n_states=1)
    p = Params(delta=[1.0], tpm=[[1.0]], means=[[0.0]], variances=[[1.0]])
    s = LabeledSeries(obs=[0.0], labels=[0])
    assert complete_data_loglik(s, p, spec) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)


def test_hsmm_hand_computation():
    p = hsmm2_params()
    x = np.array([0.3, -0.4, 1.8])
    s = LabeledSeries(obs=x, labels=[0, 0, 1])
    d1 = stats.nbinom.pmf(1, 2.0, 2.0 / 5.0)  # d_1(2)
    d2 = stats.nbinom.pmf(0, 0.7, 0.7 / 5.7)  # d_2(1)
    f = (stats.norm.logpdf(0.3, 0, 1) + stats.norm.logpdf(-0.4, 0, 1)
         + stats.norm.logpdf(1.8, 2.0, math.sqrt(0.5)))
    expected = math.log(0.3) + math.log(d1) + math.log(1.0) + math.log(d2) + f
    assert complete_data_loglik(s, p, HSMM2) == pytest.approx(expected, abs=1e-12)


def test_two_identical_series_double(rng):
    p = hsmm2_params()
    s = LabeledSeries(obs=rng.normal(size=12), labels=[0] * 4 + [1] * 5 + [0] * 3)
    one = complete_data_loglik(s, p, HSMM2)
    assert complete_data_loglik([s, s], p, HSMM2) == 2 * one


def test_run_longer_than_max_duration_rejected():
    spec = ModelSpec(family="HSMM", n_states=2, max_duration=2)
    s = LabeledSeries(obs=np.zeros(4), labels=[0, 0, 0, 1])
    with pytest.raises(ModelError):
        complete_data_loglik(s, hsmm2_params(), spec)


def test_label_out_of_range():
    s = LabeledSeries(obs=np.zeros(3), labels=[0, 2, 2])
    with pytest.raises(ModelError):
        complete_data_loglik(s, hsmm2_params(), HSMM2)


@st.composite
def hmm_problem(draw):
    J = draw(st.integers(1, 3))
    T = draw(st.integers(1, 15))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    tpm = rng.dirichlet(np.ones(J), size=J)
    if J > 1:
        tpm = 0.9 * tpm + 0.1 / J
    else:
        tpm = np.ones((1, 1))
    p = Params(delta=rng.dirichlet(np.ones(J)), tpm=tpm, means=rng.normal(size=(J, 1)),
               variances=rng.uniform(0.5, 2, size=(J, 1)))
    s = LabeledSeries(obs=rng.normal(size=T), labels=rng.integers(0, J, size=T))
    return p, s


@given(hmm_problem())
def test_hmm_sojourn_factorization_equals_chain_rule(problem):
    p, s = problem
    spec = ModelSpec(family="HMM", n_states=p.n_states)
    c = s.labels
    direct = math.log(p.delta[c[0]]) + sum(math.log(p.tpm[c[t - 1], c[t]]) for t in range(1, len(c)))
    direct += sum(stats.norm.logpdf(s.obs[t, 0], p.means[c[t], 0], math.sqrt(p.variances[c[t], 0]))
                  for t in range(len(c)))
    assert complete_data_loglik(s, p, spec) == pytest.approx(direct, abs=1e-10)


@given(seed=st.integers(0, 2**31), perm=st.permutations([0, 1, 2]))
@settings(max_examples=40)
def test_relabeling_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    J = 3
    tpm = rng.dirichlet(np.ones(J - 1), size=J)
    G = np.zeros((J, J))
    for j in range(J):
        G[j, np.arange(J) != j] = tpm[j]
    spec = ModelSpec(family="HSMM", n_states=3, ar_order=1)
    p = Params(delta=rng.dirichlet(np.ones(J)), tpm=G, means=rng.normal(size=(J, 1)),
               variances=rng.uniform(0.5, 2, (J, 1)), ar_coeffs=rng.uniform(-0.5, 0.5, (J, 1, 1)),
               sojourn_mean=rng.uniform(1, 5, J), sojourn_dispersion=rng.uniform(0.5, 5, J))
    labels = rng.integers(0, J, size=15)
    s = LabeledSeries(obs=rng.normal(size=15), labels=labels)
    inv = np.argsort(perm)
    s2 = LabeledSeries(obs=s.obs, labels=inv[labels])
    a = complete_data_loglik(s, p, spec)
    b = complete_data_loglik(s2, p.permuted(perm), spec)
    assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


# -- log posterior -------------------------------------------------------------------


def test_flat_priors_differences_match_likelihood(rng):
    s = LabeledSeries(obs=rng.normal(size=30), labels=[0] * 10 + [1] * 12 + [0] * 8)
    flat = Priors.default(HSMM2, mean_scale=1e8, sd_scale=1e8, sojourn_scale=1e8)
    pa = hsmm2_params()
    pb = hsmm2_params(means=[[0.4], [1.5]], variances=[[1.3], [0.8]], sojourn_mean=[2.0, 7.0],
                      sojourn_dispersion=[1.5, 1.0])
    d_post = log_posterior(s, pa, flat, HSMM2) - log_posterior(s, pb, flat, HSMM2)
    d_lik = complete_data_loglik(s, pa, HSMM2) - complete_data_loglik(s, pb, HSMM2)
    # log-normal priors keep a -log x term; with huge scales only that term survives
    d_jac = -(np.log(pa.sojourn_mean).sum() + np.log(pa.sojourn_dispersion).sum()
              - np.log(pb.sojourn_mean).sum() - np.log(pb.sojourn_dispersion).sum())
    assert d_post - d_jac == pytest.approx(d_lik, abs=1e-6)


def test_negative_variance_is_impossible():
    s = LabeledSeries(obs=np.zeros(3), labels=[0, 0, 1])
    bad = hsmm2_params(variances=[[-1.0], [1.0]])
    assert log_posterior(s, bad, Priors.default(HSMM2), HSMM2) == IMPOSSIBLE


def test_log_posterior_hand_sum():
    s = LabeledSeries(obs=[0.2, -0.1, 1.9, 2.2], labels=[0, 0, 1, 1])
    p = hsmm2_params()
    pr = Priors.default(HSMM2)
    lik = complete_data_loglik(s, p, HSMM2)
    prior = (stats.dirichlet.logpdf([0.3, 0.7], [1, 1])
             + stats.norm.logpdf([0.0, 2.0], 0, 10).sum()
             + stats.truncnorm.logpdf(np.sqrt([1.0, 0.5]), 0, np.inf, loc=0, scale=10).sum()
             + stats.lognorm.logpdf([3.0, 5.0, 2.0, 0.7], 1.5, scale=10.0).sum())
    # rows of a 2-state zero-diagonal tpm are degenerate Dirichlets: no contribution
    assert log_posterior(s, p, pr, HSMM2) == pytest.approx(lik + prior, abs=1e-10)
    assert log_prior(p, pr, HSMM2) == pytest.approx(prior, abs=1e-10)


def test_priors_reject_nonpositive_scale():
    d = Priors.default(HSMM2).to_dict()
    d["mean_scale"] = [[0.0], [1.0]]
    with pytest.raises(ModelError):
        Priors.from_dict(d)


# -- serialization -------------------------------------------------------------------


def test_params_json_round_trip(tmp_path):
    p = Params(delta=[0.5, 0.5], tpm=[[0, 1], [1, 0]], means=[[0, 1], [2, 3]], variances=[[1, 2], [3, 4]],
               ar_coeffs=np.arange(8.0).reshape(2, 2, 2) / 10, sojourn_mean=[3, 4], sojourn_dispersion=[1, 2])
    io.write_json(tmp_path / "p.json", io.params_to_dict(p))
    q = io.params_from_dict(io.read_json(tmp_path / "p.json"))
    for f in ("delta", "tpm", "means", "variances", "ar_coeffs", "sojourn_mean", "sojourn_dispersion"):
        np.testing.assert_array_equal(getattr(p, f), getattr(q, f))


def test_spec_round_trip():
    s = ModelSpec(family="HSMM", n_states=4, obs_dim=3, ar_order=1, max_duration=50)
    assert ModelSpec.from_dict(s.to_dict()) == s


def test_series_csv_round_trip(tmp_path):
    s = LabeledSeries(obs=np.array([[0.1, 1e-17], [2.5, -3.0]]), labels=[1, 0], id="a")
    io.write_series_csv(tmp_path / "a.csv", s)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "t,x1,x2,label"
    back = io.read_series_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.obs, s.obs)
    np.testing.assert_array_equal(back.labels, s.labels)
