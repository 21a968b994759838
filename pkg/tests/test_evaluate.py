import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semimarkov.evaluate import (
    METRICS,
    STUDY_COLUMNS,
    StudyConfig,
    accuracy,
    cross_entropy,
    loocv,
    pick_folds,
    rmse_posterior_predictive,
    run_cell,
    run_simulation_study,
    series_hash,
)
from semimarkov.fit import SamplerConfig
from semimarkov.model import LabeledSeries, ModelError, ModelSpec, Params, Priors
from semimarkov.simulate import ScenarioConfig, make_rng, simulate_series

HSMM2 = ModelSpec(family="HSMM", n_states=2)


def low_overlap_truth():
    return Params(delta=[0.5, 0.5], tpm=[[0, 1], [1, 0]], means=[[0.0], [3.0]], variances=[[1.0], [1.0]],
                  sojourn_mean=[20.0, 20.0], sojourn_dispersion=[10.0, 10.0])


# -- metrics ----------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert accuracy([0, 0, 0], [1, 1, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


def test_cross_entropy_examples():
    labels = np.array([0, 2, 1, 3])
    total, mean = cross_entropy(labels, np.eye(4)[labels])
    assert total == 0.0 and mean == 0.0
    _, mean = cross_entropy(labels, np.full((4, 4), 0.25))
    assert mean == pytest.approx(math.log(4))
    total, _ = cross_entropy([0, 0], [[0.0, 1.0], [1.0, 0.0]])
    assert total == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ModelError):
        cross_entropy([0, 2], [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ModelError):
        cross_entropy([-1, 0], [[0.5, 0.5], [0.5, 0.5]])


@given(st.integers(2, 5), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_cross_entropy_monotone_in_true_mass(J, T, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, J, T)
    probs = rng.dirichlet(np.ones(J), size=T)
    target = np.eye(J)[labels]
    prev = math.inf
    for w in np.linspace(0, 1, 6):
        total, _ = cross_entropy(labels, (1 - w) * probs + w * target)
        assert total <= prev + 1e-9
        prev = total


# -- cross-validation --------------------------------------------------------------


def test_loocv_needs_two_series():
    s = simulate_series(HSMM2, low_overlap_truth(), 50, seed=0)
    with pytest.raises(ModelError):
        loocv([s], Priors.default(HSMM2), HSMM2, 5, seed=0)


def test_loocv_structure_and_hashes():
    data = [simulate_series(HSMM2, low_overlap_truth(), 300, seed=i, series_id=f"s{i}") for i in range(3)]
    rep = loocv(data, Priors.default(HSMM2), HSMM2, 30, seed=1, sampler=SamplerConfig(burn_in=200))
    assert len(rep.rows) == 3 * 30 and len(rep.fold_rows) == 3
    for i in range(3):
        rows = [r for r in rep.rows if r["fold"] == i]
        assert len(rows) == 30 and rows[0]["series_id"] == f"s{i}"
        # each fold trains on exactly the other series
        assert set(rep.train_hashes[i]) == {series_hash(s) for k, s in enumerate(data) if k != i}
        assert series_hash(data[i]) not in rep.train_hashes[i]
    assert set(rep.summary) == set(METRICS)
    for q in rep.summary.values():
        assert q["q1"] <= q["median"] <= q["q3"]


def test_loocv_rejects_duplicate_held_out():
    s = simulate_series(HSMM2, low_overlap_truth(), 100, seed=2)
    with pytest.raises(ModelError):
        loocv([s, s], Priors.default(HSMM2), HSMM2, 2, seed=0)


def test_loocv_well_separated_states():
    truth = Params(delta=[0.5, 0.5], tpm=[[0, 1], [1, 0]], means=[[0.0], [8.0]], variances=[[1.0], [1.0]],
                   sojourn_mean=[20.0, 20.0], sojourn_dispersion=[10.0, 10.0])
    s = simulate_series(HSMM2, truth, 2000, seed=3)
    # identical content must not leak across folds, so perturb the twin below noise level
    twin = LabeledSeries(obs=s.obs + 1e-9, labels=s.labels, id="twin")
    rep = loocv([s, twin], Priors.default(HSMM2), HSMM2, 10, seed=4, sampler=SamplerConfig(burn_in=300))
    for r in rep.fold_rows:
        assert r["accuracy_local"] > 0.99 and r["accuracy_global"] > 0.99


def test_local_and_global_agree_at_low_overlap():
    data = [simulate_series(HSMM2, low_overlap_truth(), 1000, seed=10 + i) for i in range(3)]
    rep = loocv(data, Priors.default(HSMM2), HSMM2, 10, seed=5, sampler=SamplerConfig(burn_in=300))
    s = rep.summary
    assert abs(s["accuracy_local"]["median"] - s["accuracy_global"]["median"]) < 0.05


def test_pick_folds():
    assert pick_folds(5, None, 0) == [0, 1, 2, 3, 4]
    assert pick_folds(5, 9, 0) == [0, 1, 2, 3, 4]
    f = pick_folds(10, 3, 7)
    assert len(f) == 3 and f == pick_folds(10, 3, 7) and f == sorted(set(f))


# -- posterior predictive RMSE -------------------------------------------------------


def test_rmse_vanishes_for_noise_free_emissions():
    spec = ModelSpec(family="HMM", n_states=2)
    p = Params(delta=[0.5, 0.5], tpm=[[0.9, 0.1], [0.1, 0.9]], means=[[0.0], [3.0]], variances=[[1e-12], [1e-12]])
    s = simulate_series(spec, p, 200, seed=6)
    r = rmse_posterior_predictive([s], [p], spec, n_draws=20, seed=1)
    assert r.shape == (20, 1) and np.all(r < 1e-4)


def test_rmse_single_state_matches_monte_carlo():
    spec = ModelSpec(family="HMM", n_states=1, obs_dim=2)
    p = Params(delta=[1.0], tpm=[[1.0]], means=[[1.0, -2.0]], variances=[[0.5, 2.0]])
    s = simulate_series(spec, p, 500, seed=7)
    r = rmse_posterior_predictive(s, p, spec, n_draws=100, seed=2)
    assert r.shape == (100, 2)
    # oracle: replicate the predictive draw 10^5 times per dimension
    rng = make_rng(99)
    sd = np.sqrt(p.variances[0])
    reps = 200
    sims = np.empty((reps, 2))
    for i in range(reps):
        pred = p.means[0] + sd * rng.standard_normal(s.obs.shape)
        sims[i] = np.sqrt(((pred - s.obs) ** 2).mean(axis=0))
    assert reps * s.obs.shape[0] >= 10**5
    np.testing.assert_allclose(r.mean(axis=0), sims.mean(axis=0), rtol=0.01)
    np.testing.assert_allclose(r.std(axis=0), sims.std(axis=0), rtol=0.25)


def test_rmse_ar_model_counts_and_mismatch():
    spec = ModelSpec(family="HSMM", n_states=2, ar_order=1)
    p = Params(delta=[0.5, 0.5], tpm=[[0, 1], [1, 0]], means=[[0.0], [2.0]], variances=[[1.0], [1.0]],
               ar_coeffs=[[[0.5]], [[0.2]]], sojourn_mean=[10.0, 10.0], sojourn_dispersion=[2.0, 2.0])
    s = simulate_series(spec, p, 300, seed=8)
    r = rmse_posterior_predictive([s], [p, p], spec, n_draws=100)
    assert r.shape == (100, 1) and np.all(np.isfinite(r))
    # conditional on observed lags the predictive error is near sqrt(2) sd
    assert 1.1 < np.median(r) < 1.8
    with pytest.raises(ModelError):
        rmse_posterior_predictive([s], [p], HSMM2)
    with pytest.raises(ModelError):
        rmse_posterior_predictive([s], [], spec)


# -- simulation study ---------------------------------------------------------------


def tiny_config(**kw):
    sc = ScenarioConfig(n_series=2, series_length=300, **kw)
    return StudyConfig(scenario=sc, n_folds=2, n_pred_draws=3, sampler=SamplerConfig(burn_in=100))


def test_study_row_structure():
    cfg = tiny_config(overlaps=("low",), sojourn_mean_avgs=(20.0,), sojourn_mean_diffs=(3.0,),
                      dispersion_configs=("none_geometric", "one_geometric"))
    rows = run_simulation_study(cfg, seed=3)
    # two dispersion pairs per configuration, two models per cell
    assert len(rows) == 8
    assert [r["model"] for r in rows] == ["HMM", "HSMM"] * 4
    for r in rows:
        for m in STUDY_COLUMNS:
            assert r[f"{m}_q1"] <= r[f"{m}_median"] <= r[f"{m}_q3"]
    # a cell does not depend on which other cells run
    cell = cfg.scenario.cells()[1]
    assert run_cell(cell, cfg, seed=3) == rows[2:4]


def test_study_config_round_trip():
    for cfg in (StudyConfig.desk(), StudyConfig.full(), tiny_config()):
        assert StudyConfig.from_dict(cfg.to_dict()) == cfg
    assert StudyConfig.desk().scenario.n_series == 3 and StudyConfig.full().scenario.series_length == 3000


def desk_rows(**kw):
    cfg = StudyConfig.desk(**kw)
    return run_simulation_study(cfg, seed=0)


@pytest.mark.slow
def test_low_overlap_long_sojourns_models_agree():
    rows = desk_rows(overlaps=("low",), sojourn_mean_avgs=(90.0,), sojourn_mean_diffs=(3.0,),
                     dispersion_configs=("none_geometric",))
    for hmm, hsmm in zip(rows[::2], rows[1::2]):
        assert abs(hmm["accuracy_local_median"] - hsmm["accuracy_local_median"]) < 0.02


@pytest.mark.slow
def test_high_overlap_short_sojourns_favor_hsmm():
    rows = desk_rows(overlaps=("high",), sojourn_mean_avgs=(20.0,), sojourn_mean_diffs=(3.0,),
                     dispersion_configs=("none_geometric",))
    for hmm, hsmm in zip(rows[::2], rows[1::2]):
        assert hsmm["accuracy_local_median"] > hmm["accuracy_local_median"]
        assert hsmm["ce_mean_median"] <= hmm["ce_mean_median"] + 0.05
