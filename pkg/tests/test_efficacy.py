import numpy as np
import pytest

from sero.corpus import ClinicalTrial, bundled_trials_path, default_catalog_path, load_catalog
from sero.efficacy import (
    FULL_GROUP,
    PARTIAL_GROUP,
    build_poisson_trial_model,
    crude_efficacy,
    efficacy_prior_for_unlisted,
    fit_efficacy,
    fit_hyperparams,
    group_trials,
    marginal_loglik,
    posterior_efficacy,
    posterior_mean_efficacy,
    reduce_trial,
    success_prob,
)
from sero.errors import OptimizationFailed


def load_trials():
    import csv

    rows = []
    with open(bundled_trials_path()) as fh:
        for row in csv.DictReader(fh):
            rows.append(
                ClinicalTrial(
                    manufacturer_name=row["manufacturer"],
                    dose_stage=int(row["dose"]),
                    size_vaccinated=int(row["NV"]),
                    cases_vaccinated=int(row["nV"]),
                    size_placebo=int(row["NC"]),
                    cases_placebo=int(row["nC"]),
                )
            )
    return rows


TRIALS = load_trials()
BY_KEY = {(t.manufacturer_name, t.dose_stage): t for t in TRIALS}


def synthetic_trial(n=1000, cases_v=20, cases_c=100, n_c=None):
    return ClinicalTrial("X", 2, n, cases_v, n_c or n, cases_c)


# ---------------------------------------------------------------------------
# trial reduction
# ---------------------------------------------------------------------------

def test_success_prob_symmetric_null():
    assert success_prob(0.0, 1.0) == pytest.approx(0.5)


def test_success_prob_perfect_vaccine():
    assert success_prob(1.0, 1.0) == 0.0


def test_success_prob_monotone_decreasing():
    e = np.linspace(0, 1, 101)
    g = success_prob(e, 1.7)
    assert np.all(np.diff(g) < 0)
    assert g[0] == pytest.approx(1.7 / 2.7)


def test_reduce_trial_pfizer_crude_estimate():
    t = BY_KEY[("Pfizer", 2)]
    n, k, g = reduce_trial(t)
    assert n == 11 + 193 and k == 11
    crude = crude_efficacy(t)
    assert crude == pytest.approx(1 - (11 / 21669) / (193 / 21686), rel=1e-12)
    assert crude == pytest.approx(0.943, abs=5e-4)
    # the reduced success probability at the crude estimate reproduces k/n
    assert g(crude) == pytest.approx(k / n, rel=1e-9)


# ---------------------------------------------------------------------------
# marginal likelihood quadrature
# ---------------------------------------------------------------------------

def test_marginal_empty_trial_list():
    assert marginal_loglik([], 2.0, 2.0) == 0.0


def test_marginal_uniform_prior_against_brute_force():
    t = synthetic_trial()
    got = marginal_loglik([t], 1.0, 1.0)
    # refinement oracle: 10^6-point midpoint rule
    m = 1_000_000
    grid = (np.arange(m) + 0.5) / m
    n, k, g = reduce_trial(t)
    from sero.stats import binom_logpmf

    from scipy.special import logsumexp

    brute = float(logsumexp(binom_logpmf(k, n, g(grid))) - np.log(m))
    assert got == pytest.approx(brute, abs=1e-6)


def test_marginal_concentrated_prior_approaches_plugin():
    # alpha -> inf with the mean pinned at the crude estimate: the marginal
    # approaches the plug-in likelihood
    t = synthetic_trial()
    e_hat = crude_efficacy(t)
    n, k, g = reduce_trial(t)
    from sero.stats import binom_logpmf

    plugin = float(binom_logpmf(k, n, g(e_hat)))
    alpha = 1e4
    beta = alpha * (1 - e_hat) / e_hat
    got = marginal_loglik([t], alpha, beta, n_cells=20001)
    assert got == pytest.approx(plugin, abs=0.02)


def test_marginal_rejects_nonpositive_hyperparams():
    with pytest.raises(ValueError):
        marginal_loglik([synthetic_trial()], 0.0, 1.0)


# ---------------------------------------------------------------------------
# hyperparameter fitting
# ---------------------------------------------------------------------------

def test_fit_hyperparams_two_identical_trials_matches_grid_search():
    trials = [synthetic_trial(), synthetic_trial()]
    crude = crude_efficacy(trials[0])
    alpha, beta, trace = fit_hyperparams(trials, n_cells=1001)
    assert len(trace) == 9
    mean = alpha / (alpha + beta)
    assert mean == pytest.approx(crude, abs=0.05)
    # grid-search oracle over (alpha, beta) in [0.1, 100]^2
    best = -np.inf
    vals = np.geomspace(0.1, 100, 25)
    for a in vals:
        for b in vals:
            v = marginal_loglik(trials, a, b, n_cells=1001)
            best = max(best, v)
    fitted_val = marginal_loglik(trials, alpha, beta, n_cells=1001)
    assert fitted_val >= best - 1e-3


def test_fit_hyperparams_single_trial_guard():
    with pytest.raises(OptimizationFailed):
        fit_hyperparams([synthetic_trial()])


def test_fit_hyperparams_deterministic():
    trials = [synthetic_trial(), synthetic_trial(cases_v=10, cases_c=90)]
    a1, b1, _ = fit_hyperparams(trials, n_cells=801)
    a2, b2, _ = fit_hyperparams(trials, n_cells=801)
    assert (a1, b1) == (a2, b2)


# ---------------------------------------------------------------------------
# posteriors
# ---------------------------------------------------------------------------

def test_posterior_efficacy_pfizer_full_in_published_band():
    catalog = load_catalog(default_catalog_path())
    fit = fit_efficacy(catalog, TRIALS, n_draws=4000, seed=1)
    draws = fit.samples("Pfizer", 2)
    assert 0.90 <= draws.mean() <= 0.97


def test_posterior_janssen_near_crude_ratio():
    catalog = load_catalog(default_catalog_path())
    fit = fit_efficacy(catalog, TRIALS, n_draws=4000, seed=1)
    draws = fit.samples("Janssen", 1)
    crude = crude_efficacy(BY_KEY[("Janssen", 1)])
    assert crude == pytest.approx(0.666, abs=2e-3)
    assert abs(draws.mean() - crude) < 0.05


def test_posterior_zero_cases_concentrates_high_with_support_in_unit_interval():
    t = ClinicalTrial("X", 2, 5000, 0, 5000, 60)
    draws = posterior_efficacy(t, 2.0, 2.0, 4000, np.random.default_rng(0))
    assert np.all((draws > 0) & (draws < 1))
    # zero vaccinated-arm cases: mass concentrates near the top of the interval
    assert draws.mean() > 0.9
    assert np.quantile(draws, 0.05) > 0.8


def test_posterior_mean_between_prior_mean_and_crude():
    catalog = load_catalog(default_catalog_path())
    groups = group_trials(catalog, TRIALS)
    for members in groups.values():
        alpha, beta, _ = fit_hyperparams(members)
        prior_mean = alpha / (alpha + beta)
        for t in members:
            post = posterior_mean_efficacy(t, alpha, beta)
            crude = crude_efficacy(t)
            lo, hi = sorted([prior_mean, crude])
            # small allowance for likelihood skewness
            assert lo - 5e-3 <= post <= hi + 5e-3, (t.manufacturer_name, t.dose_stage)


def test_unlisted_prior_draws_match_analytic_mean():
    a, b = 6.0, 3.0
    draw = efficacy_prior_for_unlisted(a, b)
    rng = np.random.default_rng(5)
    x = draw(10_000, rng)
    assert np.all((x > 0) & (x < 1))
    beta_sd = np.sqrt(a * b / ((a + b) ** 2 * (a + b + 1)))
    se = beta_sd / np.sqrt(10_000)
    assert abs(x.mean() - a / (a + b)) < 3 * se


def test_prior_reproducible_with_seed():
    draw = efficacy_prior_for_unlisted(2.0, 5.0)
    x1 = draw(100, np.random.default_rng(9))
    x2 = draw(100, np.random.default_rng(9))
    np.testing.assert_array_equal(x1, x2)


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------

def test_group_assignment_matches_published_scheme():
    catalog = load_catalog(default_catalog_path())
    groups = group_trials(catalog, TRIALS)
    full = {(t.manufacturer_name, t.dose_stage) for t in groups[FULL_GROUP]}
    partial = {(t.manufacturer_name, t.dose_stage) for t in groups[PARTIAL_GROUP]}
    assert full == {("Pfizer", 2), ("Moderna", 2), ("AstraZeneca", 2), ("Sputnik V", 2), ("Janssen", 1)}
    assert partial == {("Pfizer", 1), ("Moderna", 1), ("AstraZeneca", 1), ("Sputnik V", 1)}


def test_group_unknown_manufacturer_rejected():
    catalog = load_catalog(default_catalog_path())
    with pytest.raises(KeyError):
        group_trials(catalog, [ClinicalTrial("NoSuch", 1, 10, 1, 10, 2)])


def test_all_table_posteriors_within_tolerance_of_crude():
    catalog = load_catalog(default_catalog_path())
    fit = fit_efficacy(catalog, TRIALS, n_draws=4000, seed=3)
    for t in TRIALS:
        draws = fit.samples(t.manufacturer_name, t.dose_stage)
        assert abs(draws.mean() - crude_efficacy(t)) < 0.05, (t.manufacturer_name, t.dose_stage)


def test_vaccine_draws_cover_all_catalog_entries():
    catalog = load_catalog(default_catalog_path())
    fit = fit_efficacy(catalog, TRIALS, n_draws=2000, seed=3)
    rng = np.random.default_rng(0)
    out = fit.vaccine_draws(catalog, 500, rng)
    assert set(out) == {v.vaccine_id for v in catalog}
    for v in catalog:
        d = out[v.vaccine_id]
        assert d["full"].shape == (500,) and d["partial"].shape == (500,)
        assert np.all((d["full"] > 0) & (d["full"] < 1))


# ---------------------------------------------------------------------------
# nuisance-rate invariance (checked lightly here; fully in acceptance)
# ---------------------------------------------------------------------------

def test_poisson_trial_model_runs():
    from sero.mcmc import ChainConfig, run_chains

    t = synthetic_trial(n=2000, cases_v=30, cases_c=120)
    model = build_poisson_trial_model(t, 2.0, 2.0, lam_prior=(1.0, 1.0))
    store = run_chains(model, ChainConfig(seed=4, n_chains=2, n_iter=1500, n_burnin=700))
    e = store.pooled("efficacy")
    assert np.all((e > 0) & (e < 1))
    assert abs(e.mean() - posterior_mean_efficacy(t, 2.0, 2.0)) < 0.02
