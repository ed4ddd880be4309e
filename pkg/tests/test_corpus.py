import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sero.corpus import (
    CorpusPaths,
    CountryStats,
    DeliveryRecord,
    VaccineCatalogEntry,
    bundled_trials_path,
    compute_delivery_shares,
    corpora_equal,
    default_catalog_path,
    ingest_corpus,
    load_catalog,
    standardize_covariates,
    validate_catalog,
    write_corpus,
)
from sero.errors import (
    DateOutOfRange,
    DegenerateCovariate,
    EmptyDeliverySet,
    InvariantViolation,
    MalformedRow,
)

from conftest import write_corpus_files


def test_ingest_basic_indexing(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    assert corpus.country_ids == (1, 2)
    assert corpus.codes == {1: "AAA", 2: "BBB"}
    assert corpus.epoch == dt.date(2021, 1, 1)
    reps = corpus.reports[1]
    assert [r.report_index for r in reps] == [1, 2, 3]
    assert reps[0].date == 4 and reps[0].cum_doses == 1000
    assert reps[0].cum_fully is None and reps[1].cum_fully == 400
    assert reps[2].vaccines_in_use == frozenset({1, 2, 3})
    assert reps[1].per_vaccine_doses == (1500, 1500, 0)
    assert corpus.reports[2][0].per_vaccine_doses is None
    assert len(corpus.surveys) == 2
    assert corpus.surveys[0].sensitivity_evidence.kind == "counts"
    assert corpus.surveys[1].sensitivity_evidence.kind == "fixed"
    assert corpus.trials[0].size_vaccinated == 21669


def test_ingest_empty_vaccination_file(corpus_dir, test_catalog):
    (corpus_dir / "vaccination.csv").write_text("country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine\n")
    with pytest.raises(MalformedRow, match="no records"):
        ingest_corpus(corpus_dir, test_catalog)


def test_ingest_mirrors_paper_country_count(tmp_path, test_catalog):
    # 182 countries reporting vaccinations, as in the real 2021 snapshot
    n = 182
    lines_c = ["country,population,pop_density,gdp_pc,confirmed_file"]
    lines_v = ["country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine"]
    files = {}
    for idx in range(n):
        code = f"C{idx:03d}"
        lines_c.append(f"{code},1000000,10.0,1000.0,confirmed_{code}.csv")
        files[f"confirmed_{code}.csv"] = "date,confirmed\n2021-01-01,10\n"
        lines_v.append(f"{code},2021-01-05,100,,2,")
    files["countries.csv"] = "\n".join(lines_c) + "\n"
    files["vaccination.csv"] = "\n".join(lines_v) + "\n"
    files["delivery.csv"] = "country,vaccine,doses\nC000,2,100\n"
    files["surveys.csv"] = (
        "country,end_date,N,X,sens_tp,sens_fn,spec_tn,spec_fp\n"
        "C000,2021-01-03,500,60,93,7,197,3\n"
    )
    files["confirmed_AAA.csv"] = None
    files["confirmed_BBB.csv"] = None
    d = write_corpus_files(tmp_path / "big", files)
    corpus = ingest_corpus(d, test_catalog)
    assert len(corpus.reports) == 182
    assert len(corpus.country_ids) == 182


def test_fully_exceeding_doses_rejected(corpus_dir, test_catalog):
    (corpus_dir / "vaccination.csv").write_text(
        "country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine\n"
        "AAA,2021-01-05,1000,1500,1,\n"
    )
    with pytest.raises(InvariantViolation, match="fully_exceeds_doses|outside"):
        ingest_corpus(corpus_dir, test_catalog)


def test_decreasing_doses_fatal_by_default(corpus_dir, test_catalog):
    (corpus_dir / "vaccination.csv").write_text(
        "country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine\n"
        "AAA,2021-01-05,1000,,1,\n"
        "AAA,2021-01-06,900,,1,\n"
    )
    with pytest.raises(InvariantViolation, match="decreased"):
        ingest_corpus(corpus_dir, test_catalog)


def test_monotonic_repair_clamps_and_logs(corpus_dir, test_catalog):
    (corpus_dir / "vaccination.csv").write_text(
        "country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine\n"
        "AAA,2021-01-05,1000,,1,\n"
        "AAA,2021-01-06,900,,1,\n"
    )
    corpus = ingest_corpus(corpus_dir, test_catalog, allow_monotonic_repair=True)
    assert corpus.reports[1][1].cum_doses == 1000
    assert any(e["code"] == "doses_repaired" for e in corpus.validation)


def test_duplicate_report_dates_rejected(corpus_dir, test_catalog):
    (corpus_dir / "vaccination.csv").write_text(
        "country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine\n"
        "AAA,2021-01-05,1000,,1,\n"
        "AAA,2021-01-05,1100,,1,\n"
    )
    with pytest.raises(InvariantViolation, match="duplicate"):
        ingest_corpus(corpus_dir, test_catalog)


def test_split_sum_mismatch_rejected(corpus_dir, test_catalog):
    (corpus_dir / "vaccination.csv").write_text(
        "country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine\n"
        "AAA,2021-01-05,1000,,1|2,1=300;2=300\n"
    )
    with pytest.raises(InvariantViolation, match="split_sum_mismatch|sum"):
        ingest_corpus(corpus_dir, test_catalog)


def test_unknown_country_rejected(corpus_dir, test_catalog):
    (corpus_dir / "surveys.csv").write_text(
        "country,end_date,N,X,sens_tp,sens_fn,spec_tn,spec_fp\n"
        "ZZZ,2021-02-01,500,60,93,7,197,3\n"
    )
    with pytest.raises(MalformedRow, match="unknown country"):
        ingest_corpus(corpus_dir, test_catalog)


# ---------------------------------------------------------------------------
# delivery shares
# ---------------------------------------------------------------------------

def test_delivery_shares_direct_normalization():
    shares = compute_delivery_shares([DeliveryRecord(1, (100.0, 300.0))], [1], 2)
    np.testing.assert_allclose(shares.get(1), [0.25, 0.75])


def test_delivery_shares_global_branch():
    recs = [DeliveryRecord(1, (100.0, 300.0)), DeliveryRecord(2, (50.0, 150.0))]
    shares = compute_delivery_shares(recs, [1, 2, 3], 2)
    np.testing.assert_allclose(shares.get(3), [150.0 / 600.0, 450.0 / 600.0])


def test_delivery_shares_empty_set():
    with pytest.raises(EmptyDeliverySet):
        compute_delivery_shares([], [1], 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_delivery_shares_rows_sum_to_one(n_delivery, n_vacc, n_extra, seed):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(1, n_delivery + 1):
        amounts = rng.integers(0, 10_000, size=n_vacc).astype(float)
        if amounts.sum() == 0:
            amounts[rng.integers(n_vacc)] = 1.0
        recs.append(DeliveryRecord(i, tuple(amounts)))
    all_ids = list(range(1, n_delivery + n_extra + 1))
    shares = compute_delivery_shares(recs, all_ids, n_vacc)
    for i in all_ids:
        row = shares.get(i)
        assert np.all(row >= 0)
        assert abs(row.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# covariates
# ---------------------------------------------------------------------------

def _stats(i, log_pd, log_g):
    return CountryStats(i, 1e6, float(np.exp(log_pd)), float(np.exp(log_g)),
                        log_pd, log_g, ((0, 0),))


def test_standardize_two_countries_hand_value():
    out, constants = standardize_covariates([_stats(1, 1.0, 1.0), _stats(2, 3.0, 3.0)])
    assert out[1][0] == pytest.approx(-0.7071067811865475)
    assert out[2][0] == pytest.approx(0.7071067811865475)
    assert constants["log_density"]["sd"] == pytest.approx(np.sqrt(2.0))


def test_standardize_identical_values_degenerate():
    with pytest.raises(DegenerateCovariate):
        standardize_covariates([_stats(1, 2.0, 1.0), _stats(2, 2.0, 3.0)])


def test_standardize_single_country_degenerate():
    with pytest.raises(DegenerateCovariate):
        standardize_covariates([_stats(1, 1.0, 1.0)])


def test_standardized_covariates_mean_zero_sd_one(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    cols = np.array([corpus.covariates[i] for i in corpus.country_ids])
    assert np.all(np.abs(cols.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(cols.std(axis=0, ddof=1) - 1.0) < 1e-10)


# ---------------------------------------------------------------------------
# confirmed ratio
# ---------------------------------------------------------------------------

def test_confirmed_ratio_before_first_record_zero(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    # AAA's first nonzero confirmed count is on day 9
    assert corpus.confirmed_ratio(1, 0) == 0.0


def test_confirmed_ratio_direct_division(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    day = corpus.day_of(dt.date(2021, 3, 1))
    assert corpus.confirmed_ratio(1, day) == pytest.approx(50000 / 1_000_000)


def test_confirmed_ratio_step_interpolation(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    # between records at days 9 (1000 cases) and 19 (2000 cases): day 14 holds 1000
    assert corpus.confirmed_ratio(1, 14) == pytest.approx(1000 / 1_000_000)


def test_confirmed_ratio_out_of_range(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    with pytest.raises(DateOutOfRange):
        corpus.confirmed_ratio(1, corpus.last_day + 1)
    with pytest.raises(DateOutOfRange):
        corpus.confirmed_ratio(1, -1)


def test_confirmed_ratio_nondecreasing(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    for i in corpus.country_ids:
        vals = [corpus.confirmed_ratio(i, d) for d in range(0, corpus.last_day + 1, 3)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# round trip and catalog
# ---------------------------------------------------------------------------

def test_roundtrip_write_then_ingest_identical(corpus_dir, test_catalog, tmp_path):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    out = tmp_path / "emitted"
    write_corpus(corpus, out)
    again = ingest_corpus(out, test_catalog)
    assert corpora_equal(corpus, again)
    # and emitting the re-ingested corpus is byte-identical
    out2 = tmp_path / "emitted2"
    write_corpus(again, out2)
    for f in sorted(p.name for p in out.iterdir()):
        assert (out / f).read_bytes() == (out2 / f).read_bytes()


def test_bundled_catalog_loads_and_validates():
    catalog = load_catalog(default_catalog_path())
    assert len(catalog) == 12
    validate_catalog(catalog)
    by_name = {v.manufacturer_name: v for v in catalog}
    assert by_name["Janssen"].vtype == 1 and by_name["Janssen"].interval_days == 0
    assert by_name["AstraZeneca"].interval_days == 84
    assert by_name["Sinovac"].interval_days == 14
    assert by_name["RBD-Dimer"].vtype == 3 and by_name["RBD-Dimer"].interval_days == 56


def test_bundled_trials_file_matches_published_counts(corpus_dir, test_catalog):
    text = bundled_trials_path().read_text()
    assert "Pfizer,2,21669,11,21686,193" in text
    assert "Janssen,1,19630,116,19691,348" in text
    assert len(text.strip().splitlines()) == 10  # header + 9 rows


def test_catalog_validation_rules():
    with pytest.raises(InvariantViolation, match="dense"):
        validate_catalog([VaccineCatalogEntry(2, "x", 1, 0)])
    with pytest.raises(InvariantViolation, match="interval 0"):
        validate_catalog([VaccineCatalogEntry(1, "x", 1, 5)])
    with pytest.raises(InvariantViolation, match="interval > 0"):
        validate_catalog([VaccineCatalogEntry(1, "x", 2, 0)])


def test_view_arrays(corpus_dir, test_catalog):
    corpus = ingest_corpus(corpus_dir, test_catalog)
    v = corpus.view(1)
    np.testing.assert_array_equal(v.days, [4, 14, 44])
    np.testing.assert_array_equal(v.cum_doses, [1000, 3000, 9000])
    assert np.isnan(v.cum_fully[0]) and v.cum_fully[1] == 400
    assert v.split_observed.all()
    np.testing.assert_array_equal(v.in_use[0], [True, True, False])
