import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sero.allocation import (
    AllocationFitData,
    ObservedSplitRow,
    allocation_loglik,
    allocation_probs,
    build_allocation_model,
    build_weights,
    check_theorem1,
    diagnostics_rows,
    impute_doses,
    observed_rows,
    partition_offsupport,
    prepare_fit,
)
from sero.corpus import ingest_corpus
from sero.errors import EmptySupport, ImproperPosterior
from sero.mcmc import ChainConfig, run_chains


def row(counts, w, i=1, j=1):
    return ObservedSplitRow(i, j, np.asarray(counts, dtype=float), np.asarray(w, dtype=float))


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def test_build_weights_indicator_zeroes_unused(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    weights = build_weights(corpus)
    # BBB uses only vaccine 2 at its first report; global shares apply (not in delivery set)
    s = corpus.shares.get(2)
    dw_first = weights.dw[2][0]
    assert dw_first[0] == 0.0 and dw_first[2] == 0.0
    assert dw_first[1] == pytest.approx(s[1] * 5000)


def test_build_weights_first_report_uses_zero_baseline(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    weights = build_weights(corpus)
    view = corpus.view(1)
    s = corpus.shares.get(1)
    np.testing.assert_allclose(
        weights.dw[1][0], s * view.cum_doses[0] * view.in_use[0]
    )


def test_build_weights_running_sum_hand_example():
    # two reports dX=(100,200), shares (0.25,0.75), both vaccines in use
    class _Shares:
        def get(self, i):
            return np.array([0.25, 0.75])

    class _View:
        days = np.array([0, 7])
        cum_doses = np.array([100.0, 300.0])
        in_use = np.ones((2, 2), dtype=bool)
        split = np.full((2, 2), np.nan)
        split_observed = np.zeros(2, dtype=bool)
        cum_fully = np.array([np.nan, np.nan])

    class _Corpus:
        country_ids = (1,)
        n_vaccines = 2
        shares = _Shares()

        def view(self, i):
            return _View()

    weights = build_weights(_Corpus())
    np.testing.assert_allclose(weights.w[1][1], [75.0, 225.0])


# ---------------------------------------------------------------------------
# probabilities
# ---------------------------------------------------------------------------

def test_probs_beta_one_is_proportional():
    np.testing.assert_allclose(allocation_probs([2.0, 8.0], 1.0), [0.2, 0.8])


def test_probs_beta_zero_uniform_on_support():
    np.testing.assert_allclose(allocation_probs([2.0, 8.0], 0.0), [0.5, 0.5])
    np.testing.assert_allclose(allocation_probs([2.0, 0.0, 8.0], 0.0), [0.5, 0.0, 0.5])


def test_probs_beta_half_hand_value():
    np.testing.assert_allclose(allocation_probs([2.0, 8.0], 0.5), [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)


def test_probs_empty_support():
    with pytest.raises(EmptySupport):
        allocation_probs([0.0, 0.0], 1.0)


def test_softmax_identity_log_ratio():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.uniform(0.1, 50.0, size=4)
        beta = rng.uniform(-2, 3)
        p = allocation_probs(w, beta)
        for x in range(4):
            for y in range(4):
                lhs = np.log(p[x] / p[y])
                rhs = beta * np.log(w[x] / w[y])
                assert abs(lhs - rhs) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 20.0), st.floats(-2.0, 3.0), st.integers(0, 2**31 - 1))
def test_probs_invariant_to_rescaling(scale, beta, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 10.0, size=5)
    w[rng.integers(5)] = 0.0
    p1 = allocation_probs(w, beta)
    p2 = allocation_probs(scale * w, beta)
    np.testing.assert_allclose(p1, p2, atol=1e-12)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def test_loglik_no_rows_is_zero():
    assert allocation_loglik([], 1.3) == 0.0


def test_loglik_single_row_hand_value():
    # X=(1,1), p=(0.5,0.5): log(2 * 0.25) = log 0.5
    r = row([1, 1], [3.0, 3.0])
    assert allocation_loglik([r], 0.7) == pytest.approx(np.log(0.5))


def test_loglik_offsupport_positive_is_minus_inf_and_flagged():
    r = row([1, 1], [3.0, 0.0])
    assert allocation_loglik([r], 1.0) == -np.inf
    good, flagged = partition_offsupport([r])
    assert not good and len(flagged) == 1


def test_prepare_fit_matches_reference_loglik():
    rng = np.random.default_rng(1)
    rows = []
    for _ in range(20):
        w = rng.uniform(0, 10, size=3)
        w[rng.integers(3)] = 0.0
        p = allocation_probs(w, 1.0)
        counts = rng.multinomial(rng.integers(1, 500), p)
        rows.append(row(counts, w))
    data = prepare_fit(rows)
    for beta in [-1.0, 0.0, 0.5, 1.0, 2.5]:
        assert data.loglik(beta) == pytest.approx(allocation_loglik(rows, beta), rel=1e-9, abs=1e-8)


# ---------------------------------------------------------------------------
# theorem 1 guard
# ---------------------------------------------------------------------------

def test_theorem1_two_positive_coordinates():
    ok, witness = check_theorem1([row([3, 2], [1.0, 1.0])])
    assert ok and witness == (1, 1)


def test_theorem1_single_positive_everywhere():
    rows = [row([5, 0], [1.0, 1.0]), row([0, 7], [1.0, 2.0])]
    ok, witness = check_theorem1(rows)
    assert not ok and witness is None


def test_theorem1_mixed_rows_returns_qualifying_witness():
    rows = [
        ObservedSplitRow(1, 1, np.array([5.0, 0.0]), np.array([1.0, 1.0])),
        ObservedSplitRow(2, 4, np.array([5.0, 3.0]), np.array([1.0, 1.0])),
        ObservedSplitRow(3, 2, np.array([0.0, 9.0]), np.array([1.0, 1.0])),
    ]
    ok, witness = check_theorem1(rows)
    assert ok and witness == (2, 4)


def test_theorem1_positive_count_off_support_does_not_qualify():
    ok, _ = check_theorem1([row([3, 2], [1.0, 0.0])])
    assert not ok


def test_fit_refuses_without_theorem1(monkeypatch):
    rows = [row([5, 0], [1.0, 1.0])]
    model = build_allocation_model(rows)
    with pytest.raises(ImproperPosterior):
        run_chains(model, ChainConfig(seed=1, n_chains=1, n_iter=40, n_burnin=20))


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------

def test_impute_single_support_all_assigned():
    rng = np.random.default_rng(0)
    out = impute_doses(137, [0.0, 4.0], 1.2, rng)
    np.testing.assert_array_equal(out, [0, 137])


def test_impute_zero_total():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(impute_doses(0, [1.0, 2.0], 1.0, rng), [0, 0])


def test_impute_reproducible_and_sums():
    out1 = impute_doses(10, [2.0, 8.0], 1.0, np.random.default_rng(42))
    out2 = impute_doses(10, [2.0, 8.0], 1.0, np.random.default_rng(42))
    np.testing.assert_array_equal(out1, out2)
    assert out1.sum() == 10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 5000), st.integers(0, 2**31 - 1))
def test_imputed_splits_sum_to_total(total, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0, 5, size=4)
    if not np.any(w > 0):
        w[0] = 1.0
    out = impute_doses(total, w, rng.normal(1, 1), rng)
    assert out.sum() == total
    assert np.all(out[w <= 0] == 0)


# ---------------------------------------------------------------------------
# posterior smoke test (full recovery study lives in the acceptance suite)
# ---------------------------------------------------------------------------

def _synthetic_rows(rng, n_rows=40, beta=1.0):
    rows = []
    for _ in range(n_rows):
        w = rng.uniform(0.5, 20.0, size=3)
        p = allocation_probs(w, beta)
        counts = rng.multinomial(2000, p)
        rows.append(row(counts, w))
    return rows


def test_posterior_concentrates_near_truth():
    rng = np.random.default_rng(7)
    rows = _synthetic_rows(rng)
    model = build_allocation_model(rows)
    store = run_chains(model, ChainConfig(seed=3, n_chains=2, n_iter=2000, n_burnin=1000))
    lo, hi = store.interval("usage_coef")
    assert lo < 1.0 < hi or abs(store.pooled("usage_coef").mean() - 1.0) < 0.05


def test_diagnostics_rows_shape(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    weights = build_weights(corpus)
    rows = diagnostics_rows(corpus, weights)
    assert len(rows) == sum(len(corpus.reports[i]) for i in corpus.country_ids)
    assert {"country", "report", "support_size", "off_support_observed"} <= set(rows[0])


def test_observed_rows_extraction(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    weights = build_weights(corpus)
    rows = observed_rows(corpus, weights)
    assert len(rows) == 3  # AAA has three observed split reports
    assert all(r.country_id == 1 for r in rows)
