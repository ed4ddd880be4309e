"""Parse, validate, and index the five input datasets.

CSV formats (headers required, dates ISO YYYY-MM-DD):

  vaccination.csv  country,date,cum_doses,cum_fully,vaccines_in_use,per_vaccine
                   vaccines_in_use: pipe-separated vaccine ids, e.g. "1|3"
                   per_vaccine: "1=500;3=250" cumulative doses by vaccine, or empty
                   cum_fully may be empty (unobserved)
  delivery.csv     country,vaccine,doses
  trials.csv       manufacturer,dose,NV,nV,NC,nC
  surveys.csv      country,end_date,N,X,sens_tp,sens_fn,spec_tn,spec_fp
                   accuracy evidence is either integer validation counts in both
                   columns of a pair, or a fixed value in (0,1) in the first
                   column with the second left empty
  countries.csv    country,population,pop_density,gdp_pc,confirmed_file
                   pop_density and gdp_pc are raw (not logged); confirmed_file
                   points to a per-country CSV (date,confirmed), relative paths
                   resolved against countries.csv

The corpus is immutable after ingestion and safe for concurrent reads.
"""

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DateOutOfRange,
    DegenerateCovariate,
    EmptyDeliverySet,
    InvariantViolation,
    MalformedRow,
)

EPOCH_FORMAT = "%Y-%m-%d"


def parse_date(text: str) -> dt.date:
    return dt.datetime.strptime(text, EPOCH_FORMAT).date()


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VaccineCatalogEntry:
    vaccine_id: int
    manufacturer_name: str
    vtype: int           # required doses for full vaccination (1, 2 or 3)
    interval_days: int   # recommended first-to-last dose interval; 0 for one-dose


@dataclass(frozen=True)
class VaccinationReport:
    country_id: int
    report_index: int    # 1-based position within the country's series
    date: int            # day offset from the corpus epoch
    cum_doses: int
    cum_fully: int | None
    vaccines_in_use: frozenset
    per_vaccine_doses: tuple | None  # cumulative doses per vaccine id 1..K


@dataclass(frozen=True)
class DeliveryRecord:
    country_id: int
    amounts: tuple  # delivered doses per vaccine id 1..K


@dataclass(frozen=True)
class DeliveryShares:
    country_ids: tuple
    matrix: tuple  # row per country, each a tuple over vaccine ids

    def get(self, country_id: int) -> np.ndarray:
        return np.array(self.matrix[self.country_ids.index(country_id)], dtype=float)

    def as_dict(self) -> dict:
        return {i: np.array(row, dtype=float) for i, row in zip(self.country_ids, self.matrix)}


@dataclass(frozen=True)
class ClinicalTrial:
    manufacturer_name: str
    dose_stage: int
    size_vaccinated: int
    cases_vaccinated: int
    size_placebo: int
    cases_placebo: int


@dataclass(frozen=True)
class AccuracyEvidence:
    """Either validation counts (successes, failures) or a fixed point value."""

    kind: str  # "counts" | "fixed"
    successes: int = 0
    failures: int = 0
    value: float = 0.0


@dataclass(frozen=True)
class Serosurvey:
    survey_id: int
    country_id: int
    end_date: int
    n_samples: int
    n_positive: int
    sensitivity_evidence: AccuracyEvidence
    specificity_evidence: AccuracyEvidence


@dataclass(frozen=True)
class CountryStats:
    country_id: int
    population: float
    density_raw: float   # people per km^2, as ingested
    gdp_raw: float       # GDP per capita, as ingested
    log_density: float
    log_gdp: float
    confirmed: tuple     # ((day, cumulative_count), ...) nondecreasing


@dataclass(frozen=True)
class CountryView:
    """Per-country report series unpacked into arrays for model code."""

    days: np.ndarray        # (J,)
    cum_doses: np.ndarray   # (J,)
    cum_fully: np.ndarray   # (J,) float, NaN where unobserved
    in_use: np.ndarray      # (J, K) bool
    split: np.ndarray       # (J, K) float, NaN rows where unobserved
    split_observed: np.ndarray  # (J,) bool


@dataclass
class Corpus:
    catalog: tuple
    country_ids: tuple
    codes: dict            # country_id -> country code
    ids: dict              # country code -> country_id
    reports: dict          # country_id -> tuple of VaccinationReport
    deliveries: tuple
    shares: DeliveryShares
    trials: tuple
    surveys: tuple
    stats: dict            # country_id -> CountryStats
    covariates: dict       # country_id -> (std log density, std log gdp)
    covariate_constants: dict
    epoch: dt.date
    last_day: int
    validation: list = field(default_factory=list)

    _views: dict = field(default_factory=dict, repr=False)

    @property
    def n_vaccines(self) -> int:
        return len(self.catalog)

    def vaccine(self, vaccine_id: int) -> VaccineCatalogEntry:
        return self.catalog[vaccine_id - 1]

    def required_doses(self) -> np.ndarray:
        return np.array([v.vtype for v in self.catalog], dtype=int)

    def intervals(self) -> np.ndarray:
        return np.array([v.interval_days for v in self.catalog], dtype=int)

    def day_of(self, date: dt.date) -> int:
        return (date - self.epoch).days

    def date_of(self, day: int) -> dt.date:
        return self.epoch + dt.timedelta(days=int(day))

    def view(self, country_id: int) -> CountryView:
        if country_id not in self._views:
            reps = self.reports.get(country_id, ())
            k = self.n_vaccines
            j = len(reps)
            days = np.array([r.date for r in reps], dtype=int)
            doses = np.array([r.cum_doses for r in reps], dtype=float)
            fully = np.array(
                [np.nan if r.cum_fully is None else r.cum_fully for r in reps], dtype=float
            )
            in_use = np.zeros((j, k), dtype=bool)
            split = np.full((j, k), np.nan)
            observed = np.zeros(j, dtype=bool)
            for idx, r in enumerate(reps):
                for v in r.vaccines_in_use:
                    in_use[idx, v - 1] = True
                if r.per_vaccine_doses is not None:
                    split[idx] = r.per_vaccine_doses
                    observed[idx] = True
            self._views[country_id] = CountryView(days, doses, fully, in_use, split, observed)
        return self._views[country_id]

    def confirmed_ratio(self, country_id: int, day: int) -> float:
        """Cumulative confirmed cases divided by population, step-interpolated
        (most recent record at or before the date; 0 before the first record)."""
        if day < 0 or day > self.last_day:
            raise DateOutOfRange(f"day {day} outside corpus range [0, {self.last_day}]")
        st = self.stats[country_id]
        value = 0.0
        for d, count in st.confirmed:
            if d <= day:
                value = count
            else:
                break
        return value / st.population


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def validate_catalog(catalog) -> None:
    ids = [v.vaccine_id for v in catalog]
    if ids != list(range(1, len(catalog) + 1)):
        raise InvariantViolation(f"vaccine ids must be dense 1..K, got {ids}")
    for v in catalog:
        if v.vtype not in (1, 2, 3):
            raise InvariantViolation(f"vaccine {v.manufacturer_name}: type must be 1, 2 or 3")
        if v.vtype == 1 and v.interval_days != 0:
            raise InvariantViolation(f"vaccine {v.manufacturer_name}: one-dose vaccines have interval 0")
        if v.vtype >= 2 and v.interval_days <= 0:
            raise InvariantViolation(f"vaccine {v.manufacturer_name}: multi-dose vaccines need interval > 0")


def load_catalog(path) -> tuple:
    rows = _read_csv(path, ["vaccine_id", "manufacturer", "type", "interval_days"])
    catalog = []
    for line, row in rows:
        catalog.append(
            VaccineCatalogEntry(
                vaccine_id=_int_field(path, line, row, "vaccine_id"),
                manufacturer_name=row["manufacturer"].strip(),
                vtype=_int_field(path, line, row, "type"),
                interval_days=_int_field(path, line, row, "interval_days"),
            )
        )
    validate_catalog(catalog)
    return tuple(catalog)


def data_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def default_catalog_path() -> Path:
    return data_path("vaccine_catalog.csv")


def bundled_trials_path() -> Path:
    return data_path("clinical_trials.csv")


# ---------------------------------------------------------------------------
# csv plumbing
# ---------------------------------------------------------------------------

def _read_csv(path, expected_header):
    path = Path(path)
    if not path.exists():
        raise MalformedRow(str(path), 0, "file does not exist")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MalformedRow(str(path), 0, "no records")
        missing = [c for c in expected_header if c not in reader.fieldnames]
        if missing:
            raise MalformedRow(str(path), 1, f"missing columns {missing}")
        rows = [(line, row) for line, row in enumerate(reader, start=2)]
    if not rows:
        raise MalformedRow(str(path), 0, "no records")
    return rows


def _int_field(path, line, row, name, minimum=None):
    raw = (row.get(name) or "").strip()
    try:
        value = int(raw)
    except ValueError:
        raise MalformedRow(str(path), line, f"column {name!r}: expected integer, got {raw!r}") from None
    if minimum is not None and value < minimum:
        raise MalformedRow(str(path), line, f"column {name!r}: {value} < {minimum}")
    return value


def _float_field(path, line, row, name):
    raw = (row.get(name) or "").strip()
    try:
        return float(raw)
    except ValueError:
        raise MalformedRow(str(path), line, f"column {name!r}: expected number, got {raw!r}") from None


def _date_field(path, line, row, name):
    raw = (row.get(name) or "").strip()
    try:
        return parse_date(raw)
    except ValueError:
        raise MalformedRow(str(path), line, f"column {name!r}: expected YYYY-MM-DD, got {raw!r}") from None


def _accuracy_field(path, line, row, first, second):
    a = (row.get(first) or "").strip()
    b = (row.get(second) or "").strip()
    if a and not b:
        value = _float_field(path, line, row, first)
        if not 0.0 < value < 1.0:
            raise MalformedRow(str(path), line, f"fixed accuracy {first}={value} must be in (0,1)")
        return AccuracyEvidence(kind="fixed", value=value)
    if a and b:
        succ = _int_field(path, line, row, first, minimum=0)
        fail = _int_field(path, line, row, second, minimum=0)
        if succ + fail == 0:
            raise MalformedRow(str(path), line, f"accuracy counts {first}/{second} are both zero")
        return AccuracyEvidence(kind="counts", successes=succ, failures=fail)
    raise MalformedRow(str(path), line, f"columns {first}/{second}: provide counts or a fixed value")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compute_delivery_shares(deliveries, all_countries, n_vaccines) -> DeliveryShares:
    """Per-country delivered-dose proportions; countries without delivery data
    get the global shares (pooled over the delivery set)."""
    if not deliveries:
        raise EmptyDeliverySet("no delivery records")
    totals = np.zeros(n_vaccines)
    by_country = {}
    for rec in deliveries:
        amounts = np.array(rec.amounts, dtype=float)
        if amounts.sum() <= 0:
            raise InvariantViolation(f"country {rec.country_id}: delivery total must be positive")
        by_country[rec.country_id] = amounts / amounts.sum()
        totals += amounts
    global_share = totals / totals.sum()
    rows = []
    for i in all_countries:
        rows.append(tuple(by_country.get(i, global_share)))
    return DeliveryShares(country_ids=tuple(all_countries), matrix=tuple(rows))


def standardize_covariates(stats_list):
    """Standardize log density and log GDP to mean 0, sample sd 1 over all
    countries. Returns (per-country dict, constants dict)."""
    if len(stats_list) < 2:
        raise DegenerateCovariate("need at least two countries to standardize")
    pd_raw = np.array([s.log_density for s in stats_list], dtype=float)
    g_raw = np.array([s.log_gdp for s in stats_list], dtype=float)
    out_constants = {}
    out = {}
    cols = {}
    for name, raw in (("log_density", pd_raw), ("log_gdp", g_raw)):
        mean = raw.mean()
        sd = raw.std(ddof=1)
        if sd == 0.0:
            raise DegenerateCovariate(f"{name} has zero sample standard deviation")
        out_constants[name] = {"mean": float(mean), "sd": float(sd)}
        cols[name] = (raw - mean) / sd
    for idx, s in enumerate(stats_list):
        out[s.country_id] = (float(cols["log_density"][idx]), float(cols["log_gdp"][idx]))
    return out, out_constants


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusPaths:
    vaccination: Path
    delivery: Path
    trials: Path
    surveys: Path
    countries: Path

    @classmethod
    def in_dir(cls, directory):
        d = Path(directory)
        return cls(
            vaccination=d / "vaccination.csv",
            delivery=d / "delivery.csv",
            trials=d / "trials.csv",
            surveys=d / "surveys.csv",
            countries=d / "countries.csv",
        )


def _parse_vaccine_set(path, line, raw, n_vaccines):
    ids = set()
    if not raw.strip():
        return frozenset()
    for token in raw.split("|"):
        try:
            v = int(token)
        except ValueError:
            raise MalformedRow(str(path), line, f"vaccines_in_use: bad id {token!r}") from None
        if not 1 <= v <= n_vaccines:
            raise MalformedRow(str(path), line, f"vaccines_in_use: unknown vaccine {v}")
        ids.add(v)
    return frozenset(ids)


def _parse_per_vaccine(path, line, raw, n_vaccines):
    raw = raw.strip()
    if not raw:
        return None
    values = np.zeros(n_vaccines, dtype=np.int64)
    for token in raw.split(";"):
        if "=" not in token:
            raise MalformedRow(str(path), line, f"per_vaccine: expected k=doses, got {token!r}")
        k_text, v_text = token.split("=", 1)
        try:
            k, v = int(k_text), int(v_text)
        except ValueError:
            raise MalformedRow(str(path), line, f"per_vaccine: bad entry {token!r}") from None
        if not 1 <= k <= n_vaccines:
            raise MalformedRow(str(path), line, f"per_vaccine: unknown vaccine {k}")
        if v < 0:
            raise MalformedRow(str(path), line, f"per_vaccine: negative doses {token!r}")
        values[k - 1] = v
    return tuple(int(v) for v in values)


def ingest_corpus(paths, catalog, allow_monotonic_repair: bool = False) -> Corpus:
    """Read, validate and index the five datasets. Invariant violations are
    fatal unless repairable under `allow_monotonic_repair` (cumulative series
    clamped to their running maximum, with a logged report entry)."""
    if isinstance(paths, (str, Path)):
        paths = CorpusPaths.in_dir(paths)
    validate_catalog(catalog)
    n_vacc = len(catalog)
    report = []
    fatal = []

    def issue(file, line, code, message, is_fatal=True):
        entry = {"file": str(file), "line": line, "code": code, "message": message}
        report.append(entry)
        if is_fatal:
            fatal.append(entry)

    # countries + confirmed series ------------------------------------------------
    stats_raw = {}
    country_rows = _read_csv(paths.countries, ["country", "population", "pop_density", "gdp_pc", "confirmed_file"])
    for line, row in country_rows:
        code = row["country"].strip()
        if not code:
            raise MalformedRow(str(paths.countries), line, "empty country code")
        if code in stats_raw:
            raise MalformedRow(str(paths.countries), line, f"duplicate country {code!r}")
        population = _float_field(paths.countries, line, row, "population")
        density = _float_field(paths.countries, line, row, "pop_density")
        gdp = _float_field(paths.countries, line, row, "gdp_pc")
        if population <= 0:
            issue(paths.countries, line, "population_nonpositive", f"{code}: population {population}")
        if density <= 0 or gdp <= 0:
            issue(paths.countries, line, "covariate_nonpositive", f"{code}: density/GDP must be positive")
        confirmed_file = (row["confirmed_file"] or "").strip()
        if not confirmed_file:
            raise MalformedRow(str(paths.countries), line, f"{code}: missing confirmed_file")
        confirmed_path = Path(paths.countries).parent / confirmed_file
        series = []
        for cline, crow in _read_csv(confirmed_path, ["date", "confirmed"]):
            d = _date_field(confirmed_path, cline, crow, "date")
            v = _int_field(confirmed_path, cline, crow, "confirmed", minimum=0)
            series.append((d, v))
        stats_raw[code] = {
            "population": population,
            "density": density,
            "gdp": gdp,
            "confirmed": series,
            "file": confirmed_path,
        }

    codes_sorted = sorted(stats_raw)
    ids = {code: idx + 1 for idx, code in enumerate(codes_sorted)}
    codes = {v: k for k, v in ids.items()}

    def country_id(path, line, code):
        code = code.strip()
        if code not in ids:
            raise MalformedRow(str(path), line, f"unknown country {code!r} (exact id matching only)")
        return ids[code]

    # vaccination -----------------------------------------------------------------
    vacc_rows = _read_csv(
        paths.vaccination,
        ["country", "date", "cum_doses", "cum_fully", "vaccines_in_use", "per_vaccine"],
    )
    raw_reports = {}
    for line, row in vacc_rows:
        i = country_id(paths.vaccination, line, row["country"])
        date = _date_field(paths.vaccination, line, row, "date")
        doses = _int_field(paths.vaccination, line, row, "cum_doses", minimum=0)
        fully_raw = (row["cum_fully"] or "").strip()
        fully = int(fully_raw) if fully_raw else None
        if fully is not None and fully < 0:
            raise MalformedRow(str(paths.vaccination), line, "cum_fully must be nonnegative")
        in_use = _parse_vaccine_set(paths.vaccination, line, row["vaccines_in_use"] or "", n_vacc)
        split = _parse_per_vaccine(paths.vaccination, line, row["per_vaccine"] or "", n_vacc)
        raw_reports.setdefault(i, []).append(
            {"line": line, "date": date, "doses": doses, "fully": fully, "in_use": in_use, "split": split}
        )

    # surveys ----------------------------------------------------------------------
    survey_rows = _read_csv(
        paths.surveys, ["country", "end_date", "N", "X", "sens_tp", "sens_fn", "spec_tn", "spec_fp"]
    )
    raw_surveys = []
    for line, row in survey_rows:
        i = country_id(paths.surveys, line, row["country"])
        end = _date_field(paths.surveys, line, row, "end_date")
        n = _int_field(paths.surveys, line, row, "N", minimum=1)
        x = _int_field(paths.surveys, line, row, "X", minimum=0)
        if x > n:
            issue(paths.surveys, line, "survey_counts", f"positives {x} exceed samples {n}")
        sens = _accuracy_field(paths.surveys, line, row, "sens_tp", "sens_fn")
        spec = _accuracy_field(paths.surveys, line, row, "spec_tn", "spec_fp")
        raw_surveys.append({"line": line, "country": i, "end": end, "n": n, "x": x, "sens": sens, "spec": spec})

    # delivery ----------------------------------------------------------------------
    delivery_rows = _read_csv(paths.delivery, ["country", "vaccine", "doses"])
    delivery_amounts = {}
    delivery_seen = set()
    for line, row in delivery_rows:
        i = country_id(paths.delivery, line, row["country"])
        k = _int_field(paths.delivery, line, row, "vaccine")
        if not 1 <= k <= n_vacc:
            raise MalformedRow(str(paths.delivery), line, f"unknown vaccine {k}")
        doses = _float_field(paths.delivery, line, row, "doses")
        if doses < 0:
            raise MalformedRow(str(paths.delivery), line, "delivered doses must be nonnegative")
        if (i, k) in delivery_seen:
            raise MalformedRow(str(paths.delivery), line, f"duplicate delivery row for vaccine {k}")
        delivery_seen.add((i, k))
        delivery_amounts.setdefault(i, np.zeros(n_vacc))[k - 1] = doses
    for i, amounts in delivery_amounts.items():
        if amounts.sum() <= 0:
            issue(paths.delivery, 0, "delivery_nonpositive", f"country {codes[i]}: zero delivered total")

    # trials -------------------------------------------------------------------------
    trial_rows = _read_csv(paths.trials, ["manufacturer", "dose", "NV", "nV", "NC", "nC"])
    trials = []
    for line, row in trial_rows:
        nv_size = _int_field(paths.trials, line, row, "NV", minimum=1)
        nv_cases = _int_field(paths.trials, line, row, "nV", minimum=0)
        nc_size = _int_field(paths.trials, line, row, "NC", minimum=1)
        nc_cases = _int_field(paths.trials, line, row, "nC", minimum=0)
        stage = _int_field(paths.trials, line, row, "dose", minimum=1)
        if nv_cases > nv_size or nc_cases > nc_size:
            issue(paths.trials, line, "trial_counts", "cases exceed group size")
        trials.append(
            ClinicalTrial(
                manufacturer_name=row["manufacturer"].strip(),
                dose_stage=stage,
                size_vaccinated=nv_size,
                cases_vaccinated=nv_cases,
                size_placebo=nc_size,
                cases_placebo=nc_cases,
            )
        )

    # epoch and day conversion --------------------------------------------------------
    all_dates = []
    for entries in raw_reports.values():
        all_dates.extend(e["date"] for e in entries)
    all_dates.extend(s["end"] for s in raw_surveys)
    for data in stats_raw.values():
        all_dates.extend(d for d, _ in data["confirmed"])
    if not all_dates:
        raise MalformedRow(str(paths.vaccination), 0, "no dated records in corpus")
    epoch = min(all_dates)
    last_day = (max(all_dates) - epoch).days

    # vaccination invariants ------------------------------------------------------------
    reports = {}
    for i, entries in raw_reports.items():
        prev_date = None
        running_max = 0
        out = []
        for j, e in enumerate(entries, start=1):
            day = (e["date"] - epoch).days
            if prev_date is not None and day == prev_date:
                issue(paths.vaccination, e["line"], "duplicate_date",
                      f"{codes[i]}: duplicate report date (duplicates are rejected, not merged)")
            elif prev_date is not None and day < prev_date:
                issue(paths.vaccination, e["line"], "date_order",
                      f"{codes[i]}: report dates must be strictly increasing")
            prev_date = day
            doses = e["doses"]
            if doses < running_max:
                if allow_monotonic_repair:
                    issue(paths.vaccination, e["line"], "doses_repaired",
                          f"{codes[i]}: cum_doses {doses} clamped to running max {running_max}",
                          is_fatal=False)
                    doses = running_max
                else:
                    issue(paths.vaccination, e["line"], "doses_decreasing",
                          f"{codes[i]}: cumulative doses decreased ({doses} < {running_max})")
            running_max = max(running_max, doses)
            if e["fully"] is not None and not 0 <= e["fully"] <= doses:
                issue(paths.vaccination, e["line"], "fully_exceeds_doses",
                      f"{codes[i]}: cum_fully {e['fully']} outside [0, {doses}]")
            if e["split"] is not None and sum(e["split"]) != doses:
                issue(paths.vaccination, e["line"], "split_sum_mismatch",
                      f"{codes[i]}: per-vaccine doses sum {sum(e['split'])} != cum_doses {doses}")
            out.append(
                VaccinationReport(
                    country_id=i,
                    report_index=j,
                    date=day,
                    cum_doses=doses,
                    cum_fully=e["fully"],
                    vaccines_in_use=e["in_use"],
                    per_vaccine_doses=e["split"],
                )
            )
        reports[i] = tuple(out)

    # survey invariants ----------------------------------------------------------------
    surveys = []
    for sid, s in enumerate(raw_surveys, start=1):
        day = (s["end"] - epoch).days
        if not 0 <= day <= last_day:
            issue(paths.surveys, s["line"], "survey_date_range",
                  f"survey end date outside corpus range")
        surveys.append(
            Serosurvey(
                survey_id=sid,
                country_id=s["country"],
                end_date=day,
                n_samples=s["n"],
                n_positive=s["x"],
                sensitivity_evidence=s["sens"],
                specificity_evidence=s["spec"],
            )
        )

    # country stats invariants ------------------------------------------------------------
    stats = {}
    for code, data in stats_raw.items():
        i = ids[code]
        series = []
        prev = 0
        prev_day = None
        for d, v in data["confirmed"]:
            day = (d - epoch).days
            if prev_day is not None and day <= prev_day:
                issue(data["file"], 0, "confirmed_date_order",
                      f"{code}: confirmed dates must be strictly increasing")
            prev_day = day
            if v < prev:
                if allow_monotonic_repair:
                    issue(data["file"], 0, "confirmed_repaired",
                          f"{code}: confirmed {v} clamped to running max {prev}", is_fatal=False)
                    v = prev
                else:
                    issue(data["file"], 0, "confirmed_decreasing",
                          f"{code}: cumulative confirmed decreased ({v} < {prev})")
            prev = max(prev, v)
            series.append((day, v))
        if series and data["population"] > 0 and series[-1][1] > data["population"]:
            issue(data["file"], 0, "confirmed_exceeds_population",
                  f"{code}: confirmed {series[-1][1]} exceeds population")
        stats[i] = CountryStats(
            country_id=i,
            population=data["population"],
            density_raw=data["density"],
            gdp_raw=data["gdp"],
            log_density=float(np.log(data["density"])) if data["density"] > 0 else np.nan,
            log_gdp=float(np.log(data["gdp"])) if data["gdp"] > 0 else np.nan,
            confirmed=tuple(series),
        )

    if fatal:
        first = fatal[0]
        raise InvariantViolation(
            f"{len(fatal)} fatal validation issue(s); first: {first['file']}:{first['line']} "
            f"[{first['code']}] {first['message']}",
            report=report,
        )

    deliveries = tuple(
        DeliveryRecord(country_id=i, amounts=tuple(float(a) for a in delivery_amounts[i]))
        for i in sorted(delivery_amounts)
    )
    all_ids = tuple(ids[c] for c in codes_sorted)
    shares = compute_delivery_shares(deliveries, all_ids, n_vacc)
    covariates, constants = standardize_covariates([stats[i] for i in all_ids])

    return Corpus(
        catalog=tuple(catalog),
        country_ids=all_ids,
        codes=codes,
        ids=ids,
        reports=reports,
        deliveries=deliveries,
        shares=shares,
        trials=tuple(trials),
        surveys=tuple(surveys),
        stats=stats,
        covariates=covariates,
        covariate_constants=constants,
        epoch=epoch,
        last_day=last_day,
        validation=report,
    )


# ---------------------------------------------------------------------------
# serialization (canonical form; parse . serialize is the identity)
# ---------------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_corpus(corpus: Corpus, directory) -> CorpusPaths:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = CorpusPaths.in_dir(directory)

    with open(paths.vaccination, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "date", "cum_doses", "cum_fully", "vaccines_in_use", "per_vaccine"])
        for i in corpus.country_ids:
            for r in corpus.reports.get(i, ()):
                in_use = "|".join(str(v) for v in sorted(r.vaccines_in_use))
                split = (
                    ";".join(f"{k + 1}={v}" for k, v in enumerate(r.per_vaccine_doses))
                    if r.per_vaccine_doses is not None
                    else ""
                )
                w.writerow([
                    corpus.codes[i],
                    corpus.date_of(r.date).isoformat(),
                    r.cum_doses,
                    "" if r.cum_fully is None else r.cum_fully,
                    in_use,
                    split,
                ])

    with open(paths.delivery, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "vaccine", "doses"])
        for rec in corpus.deliveries:
            for k, amount in enumerate(rec.amounts, start=1):
                if amount != 0.0:
                    w.writerow([corpus.codes[rec.country_id], k, _fmt_float(amount)])

    with open(paths.trials, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["manufacturer", "dose", "NV", "nV", "NC", "nC"])
        for t in corpus.trials:
            w.writerow([t.manufacturer_name, t.dose_stage, t.size_vaccinated,
                        t.cases_vaccinated, t.size_placebo, t.cases_placebo])

    with open(paths.surveys, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "end_date", "N", "X", "sens_tp", "sens_fn", "spec_tn", "spec_fp"])
        for s in corpus.surveys:
            sens = s.sensitivity_evidence
            spec = s.specificity_evidence
            sens_cols = [sens.successes, sens.failures] if sens.kind == "counts" else [_fmt_float(sens.value), ""]
            spec_cols = [spec.successes, spec.failures] if spec.kind == "counts" else [_fmt_float(spec.value), ""]
            w.writerow([
                corpus.codes[s.country_id],
                corpus.date_of(s.end_date).isoformat(),
                s.n_samples,
                s.n_positive,
                *sens_cols,
                *spec_cols,
            ])

    with open(paths.countries, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "population", "pop_density", "gdp_pc", "confirmed_file"])
        for i in corpus.country_ids:
            st = corpus.stats[i]
            code = corpus.codes[i]
            fname = f"confirmed_{code}.csv"
            w.writerow([
                code,
                _fmt_float(st.population),
                _fmt_float(st.density_raw),
                _fmt_float(st.gdp_raw),
                fname,
            ])
            with open(directory / fname, "w", newline="") as cfh:
                cw = csv.writer(cfh)
                cw.writerow(["date", "confirmed"])
                for day, v in st.confirmed:
                    cw.writerow([corpus.date_of(day).isoformat(), v])

    return paths


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    if a.epoch != b.epoch or a.country_ids != b.country_ids or a.codes != b.codes:
        return False
    if a.catalog != b.catalog or a.trials != b.trials or a.surveys != b.surveys:
        return False
    if a.deliveries != b.deliveries:
        return False
    if set(a.reports) != set(b.reports):
        return False
    for i in a.reports:
        if a.reports[i] != b.reports[i]:
            return False
    for i in a.stats:
        if a.stats[i] != b.stats[i]:
            return False
    return True
