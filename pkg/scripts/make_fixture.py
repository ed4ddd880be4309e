#!/usr/bin/env python3
"""Regenerate the bundled synthetic fixture (5 countries, 3 vaccines, 10
surveys, 120 days) with known ground truth.

The vaccination series are written first, then the package's own weight and
recency machinery generates the observed per-vaccine splits and
fully-vaccinated counts from the generating coefficients, so fixture data and
model structure agree exactly. Ground truth is recorded in truth.json.

Usage: python scripts/make_fixture.py [--out DIR]
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sero import allocation, completion  # noqa: E402
from sero.corpus import CorpusPaths, ingest_corpus, load_catalog  # noqa: E402
from sero.infection import apparent_prevalence, combine_seroprevalence  # noqa: E402
from sero.stats import round_half_even, truncnorm_rvs  # noqa: E402
from sero.vaccination import partial_basis, report_index_at  # noqa: E402

SEED = 987654321

TRUTH = {
    "usage_coef": 1.0,
    "completion_intercept": -0.935,
    "completion_slope": 1.15,
    "mu0": 1.2,
    "sigma": 0.4,
    "tau": 0.3,
    "density_coef": 0.079,
    "gdp_coef": -0.581,
}

EPOCH = "2021-01-01"
N_DAYS = 120

COUNTRIES = {
    # code: population, density, gdp, vacc_start, base_rate, confirmed_end_share
    "ALP": dict(population=200_000, density=48.0, gdp=5_200.0, start=10, rate=110.0, conf=0.045),
    "BRV": dict(population=500_000, density=310.0, gdp=44_000.0, start=5, rate=260.0, conf=0.020),
    "CYM": dict(population=100_000, density=14.0, gdp=2_100.0, start=30, rate=45.0, conf=0.060),
    "DRK": dict(population=800_000, density=120.0, gdp=15_500.0, start=15, rate=380.0, conf=0.030),
    "EST": dict(population=300_000, density=85.0, gdp=29_000.0, start=20, rate=140.0, conf=0.015),
}

# vaccine ids in the fixture catalog: 1=Janssen (one dose), 2=Pfizer (21d), 3=Moderna (28d)
VACCINE_PHASES = {
    "ALP": [(10, {2}), (40, {2, 3})],
    "BRV": [(5, {2}), (25, {1, 2}), (55, {1, 2, 3})],
    "CYM": [(30, {1}), (60, {1, 2})],
    "DRK": [(15, {2, 3}), (45, {1, 2, 3})],
    "EST": [(20, {2}), (50, {2, 3})],
}

SPLIT_OBSERVED = {"ALP", "BRV"}
FULLY_OBSERVED = {"ALP", "CYM", "DRK"}

DELIVERIES = {
    "ALP": {2: 60_000.0, 3: 25_000.0},
    "BRV": {1: 40_000.0, 2: 180_000.0, 3: 60_000.0},
    "CYM": {1: 12_000.0, 2: 9_000.0},
    "DRK": {1: 50_000.0, 2: 260_000.0, 3: 90_000.0},
}

SURVEYS = [
    # country, day, N, sens evidence, spec evidence ("counts": (a,b) or "fixed": v)
    ("ALP", 8, 2400, ("counts", 118, 9), ("counts", 391, 6)),
    ("ALP", 60, 3200, ("counts", 118, 9), ("counts", 391, 6)),
    ("ALP", 110, 2800, ("counts", 118, 9), ("counts", 391, 6)),
    ("BRV", 3, 4000, ("fixed", 0.95), ("fixed", 0.99)),
    ("BRV", 70, 3600, ("fixed", 0.95), ("fixed", 0.99)),
    ("BRV", 115, 3000, ("counts", 176, 11), ("counts", 489, 4)),
    ("CYM", 25, 1500, ("counts", 84, 8), ("counts", 282, 5)),
    ("CYM", 100, 1800, ("counts", 84, 8), ("counts", 282, 5)),
    ("DRK", 12, 3500, ("counts", 141, 7), ("counts", 462, 8)),
    ("DRK", 90, 3900, ("counts", 141, 7), ("counts", 462, 8)),
]

# crude-ratio efficacies used to generate survey positives (full, partial)
GEN_EFFICACY = {1: (0.666, 0.666), 2: (0.943, 0.524), 3: (0.945, 0.806)}

CATALOG_CSV = """vaccine_id,manufacturer,type,interval_days
1,Janssen,1,0
2,Pfizer,2,21
3,Moderna,2,28
"""

TRIALS_CSV = """manufacturer,dose,NV,nV,NC,nC
Pfizer,1,21669,39,21686,82
Pfizer,2,21669,11,21686,193
Moderna,1,996,7,1079,39
Moderna,2,13934,5,13883,90
Janssen,1,19630,116,19691,348
"""

CONFIG_JSON = {
    "paths": {
        "vaccination": "vaccination.csv",
        "delivery": "delivery.csv",
        "trials": "trials.csv",
        "surveys": "surveys.csv",
        "countries": "countries.csv",
        "catalog": "catalog.csv",
    },
    "mcmc": {"chains": 4, "iters": 4000, "burnin": 2000, "seed": 20210731, "adapt_window": 50},
    "model": {"delta": 21, "accuracy_concentration": 200.0, "joint": False},
    "output": {"dir": "out", "stride": 1, "draws": 1000, "svg": False},
}


def day_to_date(day):
    import datetime as dt

    return (dt.date(2021, 1, 1) + dt.timedelta(days=int(day))).isoformat()


def in_use_at(code, day):
    current = set()
    for start, vaccines in VACCINE_PHASES[code]:
        if day >= start:
            current = vaccines
    return current


def generate_vaccination_series(rng):
    """Cumulative dose totals per country with ramping daily rates."""
    series = {}
    for code, info in COUNTRIES.items():
        days = []
        totals = []
        x = 0.0
        for day in range(info["start"], N_DAYS, 3):
            ramp = 1.0 + (day - info["start"]) / 45.0
            x += 3 * info["rate"] * ramp * rng.uniform(0.7, 1.3)
            days.append(day)
            totals.append(int(round(x)))
        series[code] = (days, totals)
    return series


def write_base_files(out, rng, series):
    with open(out / "catalog.csv", "w") as fh:
        fh.write(CATALOG_CSV)
    with open(out / "trials.csv", "w") as fh:
        fh.write(TRIALS_CSV)

    with open(out / "countries.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "population", "pop_density", "gdp_pc", "confirmed_file"])
        for code, info in COUNTRIES.items():
            w.writerow([code, info["population"], info["density"], info["gdp"], f"confirmed_{code}.csv"])
            with open(out / f"confirmed_{code}.csv", "w", newline="") as cfh:
                cw = csv.writer(cfh)
                cw.writerow(["date", "confirmed"])
                final = info["conf"] * info["population"]
                count = max(final * 0.004, 20.0)
                prev = 0
                for day in range(0, N_DAYS, 5):
                    progress = day / (N_DAYS - 1)
                    value = final * (count / final) ** (1.0 - progress)
                    value = int(round(max(value * rng.uniform(0.97, 1.03), prev)))
                    cw.writerow([day_to_date(day), value])
                    prev = value

    with open(out / "delivery.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "vaccine", "doses"])
        for code, amounts in DELIVERIES.items():
            for k, doses in sorted(amounts.items()):
                w.writerow([code, k, doses])

    with open(out / "vaccination.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "date", "cum_doses", "cum_fully", "vaccines_in_use", "per_vaccine"])
        for code, (days, totals) in series.items():
            for day, total in zip(days, totals):
                vset = "|".join(str(v) for v in sorted(in_use_at(code, day)))
                w.writerow([code, day_to_date(day), total, "", vset, ""])

    # provisional surveys so the preliminary ingest passes; replaced later
    with open(out / "surveys.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "end_date", "N", "X", "sens_tp", "sens_fn", "spec_tn", "spec_fp"])
        w.writerow(["ALP", day_to_date(60), 100, 10, 90, 10, 95, 5])


def generate_hidden_truth(out, rng):
    """Per-vaccine splits and fully-vaccinated counts for every report, from
    the generating coefficients; returns per-country report-level truth."""
    catalog = load_catalog(out / "catalog.csv")
    corpus = ingest_corpus(CorpusPaths.in_dir(out), catalog)
    weights = allocation.build_weights(corpus)
    vtypes = corpus.required_doses()
    intervals = corpus.intervals()
    truth = {}
    for i in corpus.country_ids:
        code = corpus.codes[i]
        view = corpus.view(i)
        j_count = view.days.size
        splits = np.zeros((j_count, 3), dtype=np.int64)
        fully = np.zeros(j_count, dtype=np.int64)
        fully_split = np.zeros((j_count, 3), dtype=np.int64)
        counters = {}
        for j in range(1, j_count + 1):
            x_j = int(view.cum_doses[j - 1])
            splits[j - 1] = allocation.impute_doses(
                x_j, weights.w[i][j - 1], TRUTH["usage_coef"], rng
            )
            ctx = completion.recency_context(corpus, weights, i, j)
            try:
                y = completion.impute_fully(
                    x_j, ctx, TRUTH["completion_intercept"], TRUTH["completion_slope"], rng, counters
                )
            except Exception:
                y = x_j
            one_dose_total = int(splits[j - 1][vtypes == 1].sum())
            y = max(y, one_dose_total)
            fully[j - 1] = y
            fully_split[j - 1] = completion.split_fully_by_vaccine(
                y, splits[: j].astype(float), j, view.days, vtypes, intervals,
                view.in_use[j - 1], corpus.shares.get(i), rng, counters,
            )
        truth[code] = {
            "days": view.days.tolist(),
            "totals": view.cum_doses.astype(int).tolist(),
            "splits": splits.tolist(),
            "fully": fully.tolist(),
            "fully_split": fully_split.tolist(),
        }
    return corpus, truth


def theta_v_expected(corpus, truth, code, day):
    info = truth[code]
    days = np.array(info["days"])
    j = report_index_at(days, day)
    if j == 0:
        return 0.0
    splits = np.array(info["splits"][j - 1])
    y_split = np.array(info["fully_split"][j - 1])
    vtypes = corpus.required_doses()
    basis = partial_basis(splits, y_split, vtypes)
    expected = 0.0
    for k in range(3):
        ef, ep = GEN_EFFICACY[k + 1]
        expected += y_split[k] * ef + basis[k] * ep
    population = COUNTRIES[code]["population"]
    return min(expected / population, 1.0)


def rewrite_vaccination_with_observations(out, truth):
    rows = []
    for code, info in truth.items():
        for idx, day in enumerate(info["days"]):
            split_cell = ""
            if code in SPLIT_OBSERVED:
                split_cell = ";".join(f"{k + 1}={info['splits'][idx][k]}" for k in range(3)
                                      if info["splits"][idx][k] > 0 or (k + 1) in in_use_at(code, day))
                # ensure the cell always sums to the total, including zeros
                split_cell = ";".join(f"{k + 1}={info['splits'][idx][k]}" for k in range(3))
            fully_cell = info["fully"][idx] if code in FULLY_OBSERVED else ""
            vset = "|".join(str(v) for v in sorted(in_use_at(code, day)))
            rows.append([code, day_to_date(day), info["totals"][idx], fully_cell, vset, split_cell])
    with open(out / "vaccination.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "date", "cum_doses", "cum_fully", "vaccines_in_use", "per_vaccine"])
        w.writerows(rows)


def generate_surveys(out, corpus, truth, rng):
    codes = list(COUNTRIES)
    log_pd = np.log([COUNTRIES[c]["density"] for c in codes])
    log_gdp = np.log([COUNTRIES[c]["gdp"] for c in codes])
    pd_std = (log_pd - log_pd.mean()) / log_pd.std(ddof=1)
    gdp_std = (log_gdp - log_gdp.mean()) / log_gdp.std(ddof=1)
    effects = {c: float(rng.normal(TRUTH["mu0"], TRUTH["sigma"])) for c in codes}

    survey_truth = []
    rows = []
    for code, day, n, sens_ev, spec_ev in SURVEYS:
        c = codes.index(code)
        i = corpus.ids[code]
        theta_c = corpus.confirmed_ratio(i, day)
        bound = -np.log(theta_c)
        mean = effects[code] + TRUTH["density_coef"] * pd_std[c] + TRUTH["gdp_coef"] * gdp_std[c]
        ratio = float(truncnorm_rvs(mean, TRUTH["tau"], 0.0, bound, rng))
        theta_i = theta_c * np.exp(ratio)
        tv = theta_v_expected(corpus, truth, code, day)
        theta = combine_seroprevalence(tv, theta_i)
        sens_true = sens_ev[1] / (sens_ev[1] + sens_ev[2]) if sens_ev[0] == "counts" else sens_ev[1]
        spec_true = spec_ev[1] / (spec_ev[1] + spec_ev[2]) if spec_ev[0] == "counts" else spec_ev[1]
        p_app = apparent_prevalence(theta, sens_true, spec_true)
        x = int(rng.binomial(n, p_app))
        sens_cols = [sens_ev[1], sens_ev[2]] if sens_ev[0] == "counts" else [sens_ev[1], ""]
        spec_cols = [spec_ev[1], spec_ev[2]] if spec_ev[0] == "counts" else [spec_ev[1], ""]
        rows.append([code, day_to_date(day), n, x, *sens_cols, *spec_cols])
        survey_truth.append({
            "country": code, "day": day, "n": n, "x": x,
            "theta_c": theta_c, "theta_v": tv, "theta_i": float(theta_i),
            "theta": float(theta), "ratio": ratio,
        })
    with open(out / "surveys.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "end_date", "N", "X", "sens_tp", "sens_fn", "spec_tn", "spec_fp"])
        w.writerows(rows)
    return {"effects": effects, "surveys": survey_truth,
            "pd_std": dict(zip(codes, pd_std.tolist())),
            "gdp_std": dict(zip(codes, gdp_std.tolist()))}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    default_out = Path(__file__).resolve().parent.parent / "src" / "sero" / "data" / "fixture"
    parser.add_argument("--out", type=Path, default=default_out)
    args = parser.parse_args(argv)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(SEED)
    series = generate_vaccination_series(rng)
    write_base_files(out, rng, series)
    corpus, truth = generate_hidden_truth(out, rng)
    rewrite_vaccination_with_observations(out, truth)
    survey_truth = generate_surveys(out, corpus, truth, rng)

    (out / "config.json").write_text(json.dumps(CONFIG_JSON, indent=2, sort_keys=True))
    (out / "truth.json").write_text(json.dumps({
        "seed": SEED,
        "coefficients": TRUTH,
        "generation_efficacy": {str(k): v for k, v in GEN_EFFICACY.items()},
        "hidden": survey_truth,
    }, indent=2, sort_keys=True))

    n_reports = sum(len(s[0]) for s in series.values())
    print(f"fixture written to {out}: {len(COUNTRIES)} countries, {n_reports} reports, {len(SURVEYS)} surveys")


if __name__ == "__main__":
    main()
