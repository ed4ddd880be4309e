"""Model and impute the cumulative fully-vaccinated count, and split it by vaccine.

The Poisson regression targets twice the gap between doses and fully-vaccinated
people; its mean mixes two- and three-dose terms weighted by each type's share
of recent dose mass. Recency is anchored at the closest earlier report to a
configurable lookback (21 days by default).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeights, NoEarlierReport, UndefinedLogArgument, ZeroWindow
from .mcmc import Block, ModelGraph, Node, Real
from .stats import poisson_logpmf, round_half_even

log = logging.getLogger("sero.completion")

DEFAULT_LOOKBACK = 21
_LAMBDA_CAP = 1e290  # keeps Poisson log-pmf finite when proposals overflow exp


def closest_report_index(days, j, delta) -> int:
    """Index (1-based) of the earlier report whose date is closest to
    date_j - delta; ties break to the smallest index."""
    if j < 2:
        raise NoEarlierReport(f"report {j} has no earlier report")
    days = np.asarray(days)
    gaps = np.abs(days[j - 1] - days[: j - 1] - delta)
    return int(np.argmin(gaps)) + 1  # argmin returns the first minimizer


@dataclass(frozen=True)
class RecencyContext:
    ref_index: int | None      # closest earlier report (None for the first report)
    daily_rate: float          # average daily doses over the window
    window_weights: np.ndarray  # (K,) normalized dose mass per vaccine
    two_dose_scale: float      # rate x interval-weighted two-dose mass
    three_dose_scale: float
    type_shares: tuple         # (one-dose, two-dose, three-dose) weight


def recency_context(corpus, weights, country_id, j, delta=DEFAULT_LOOKBACK) -> RecencyContext:
    view = corpus.view(country_id)
    days = view.days
    doses = view.cum_doses
    vtypes = corpus.required_doses()
    intervals = corpus.intervals().astype(float)

    if j >= 2:
        ref = closest_report_index(days, j, delta)
        dt_days = days[j - 1] - days[ref - 1]
        if dt_days == 0:
            raise ZeroWindow(f"reports {ref} and {j} share a date")
        rate = (doses[j - 1] - doses[ref - 1]) / dt_days
        lo = ref - 1
    else:
        # first report: doses accumulated since the country's first vaccination
        # date, counted as at least one day
        ref = None
        country_epoch = days[0]
        rate = doses[0] / max(days[0] - country_epoch, 1)
        lo = 0

    window = weights.dw[country_id][lo:j].sum(axis=0)
    total = window.sum()
    if total > 0:
        wstar = window / total
    else:
        fallback = corpus.shares.get(country_id) * view.in_use[j - 1]
        ftotal = fallback.sum()
        if ftotal > 0:
            log.warning("country %s report %d: zero dose mass in window, using delivery shares",
                        corpus.codes.get(country_id, country_id), j)
            wstar = fallback / ftotal
        else:
            raise DegenerateWeights(
                f"country {country_id} report {j}: no dose mass and no usable delivery shares"
            )

    shares_by_type = tuple(float(wstar[vtypes == t].sum()) for t in (1, 2, 3))
    scale2 = float(rate * np.sum(wstar[vtypes == 2] * intervals[vtypes == 2]))
    scale3 = float(rate * np.sum(wstar[vtypes == 3] * intervals[vtypes == 3]))
    return RecencyContext(
        ref_index=ref,
        daily_rate=float(rate),
        window_weights=wstar,
        two_dose_scale=scale2,
        three_dose_scale=scale3,
        type_shares=shares_by_type,
    )


def completion_mean(total_doses, ctx: RecencyContext, intercept, slope) -> float:
    """Poisson mean for 2*(doses - fully); zero for pure one-dose reports."""
    _, q2, q3 = ctx.type_shares
    lam = 0.0
    if q2 > 0:
        if ctx.two_dose_scale <= 0:
            raise UndefinedLogArgument("two-dose share positive but scale is zero")
        lam += q2 * (total_doses + np.exp(intercept + slope * np.log(ctx.two_dose_scale)))
    if q3 > 0:
        if ctx.three_dose_scale <= 0:
            raise UndefinedLogArgument("three-dose share positive but scale is zero")
        lam += q3 * ((4.0 / 3.0) * total_doses
                     + (2.0 / 3.0) * np.exp(intercept + slope * np.log(ctx.three_dose_scale)))
    return float(min(lam, _LAMBDA_CAP))


@dataclass(frozen=True)
class CompletionRow:
    country_id: int
    report_index: int
    total_doses: int
    fully: int
    ctx: RecencyContext

    @property
    def gap2(self) -> int:
        return 2 * (self.total_doses - self.fully)


def completion_loglik(rows, intercept, slope) -> float:
    """Poisson log likelihood over observed rows. A zero mean with a positive
    count contributes -inf (flagged in the log)."""
    total = 0.0
    for r in rows:
        lam = completion_mean(r.total_doses, r.ctx, intercept, slope)
        ll = float(poisson_logpmf(r.gap2, lam))
        if lam == 0.0 and r.gap2 > 0:
            log.warning("country %d report %d: zero mean with positive gap", r.country_id, r.report_index)
        total += ll
    return total


def _regressor(row) -> float:
    _, q2, q3 = row.ctx.type_shares
    x = 0.0
    if q2 > 0:
        x += q2 * np.log(row.ctx.two_dose_scale)
    if q3 > 0:
        x += q3 * np.log(row.ctx.three_dose_scale)
    return float(x)


def check_theorem2(rows) -> tuple:
    """Flat-prior propriety condition: at least two contributing rows with
    distinct share-weighted log-scale regressors. Returns (ok, witness)."""
    contributing = [r for r in rows if r.ctx.type_shares[1] > 0 or r.ctx.type_shares[2] > 0]
    if len(contributing) < 2:
        return False, None
    xs = [_regressor(r) for r in contributing]
    first = xs[0]
    for r, x in zip(contributing[1:], xs[1:]):
        if x != first:
            a = contributing[0]
            return True, ((a.country_id, a.report_index), (r.country_id, r.report_index))
    return False, None


def impute_fully(total_doses, ctx, intercept, slope, rng, counters=None) -> int:
    """Posterior-predictive fully-vaccinated count: draw the doubled gap from
    the Poisson model, halve with round-half-even, clamp into [0, doses]."""
    lam = completion_mean(total_doses, ctx, intercept, slope)
    gap2 = int(rng.poisson(lam))
    if counters is not None and gap2 % 2 == 1:
        counters["completion_odd_gap_rounded"] = counters.get("completion_odd_gap_rounded", 0) + 1
    gap = round_half_even(gap2 / 2.0)
    fully = total_doses - gap
    if fully < 0 or fully > total_doses:
        if counters is not None:
            counters["completion_clamped"] = counters.get("completion_clamped", 0) + 1
        fully = min(max(fully, 0), total_doses)
    return int(fully)


def split_fully_by_vaccine(
    fully, splits, j, days, vtypes, intervals, in_use_row, shares_row, rng, counters=None
) -> np.ndarray:
    """Split a report's fully-vaccinated total across vaccines.

    One-dose vaccines take their own cumulative doses; the remainder goes
    multinomially across the others with probabilities proportional to their
    cumulative doses at the interval-lagged report.
    """
    vtypes = np.asarray(vtypes)
    k_total = vtypes.size
    out = np.zeros(k_total, dtype=np.int64)
    one_dose = vtypes == 1
    out[one_dose] = np.round(splits[j - 1][one_dose]).astype(np.int64)
    remaining = int(fully) - int(out[one_dose].sum())
    if remaining < 0:
        if counters is not None:
            counters["split_infeasible"] = counters.get("split_infeasible", 0) + 1
        log.warning("fully-vaccinated %s below one-dose doses at report %d; remainder clamped to 0", fully, j)
        remaining = 0
    multi = np.flatnonzero(~one_dose)
    if remaining == 0 or multi.size == 0:
        if remaining > 0 and counters is not None:
            counters["split_unassignable"] = counters.get("split_unassignable", 0) + 1
        return out
    lagged = np.zeros(multi.size)
    for pos, k in enumerate(multi):
        ref = closest_report_index(days, j, int(intervals[k])) if j >= 2 else j
        lagged[pos] = max(splits[ref - 1][k], 0.0)
    total = lagged.sum()
    if total <= 0:
        if counters is not None:
            counters["split_zero_lagged"] = counters.get("split_zero_lagged", 0) + 1
        fallback = np.asarray(shares_row, dtype=float)[multi] * np.asarray(in_use_row)[multi]
        total = fallback.sum()
        if total <= 0:
            if counters is not None:
                counters["split_unassignable"] = counters.get("split_unassignable", 0) + 1
            return out
        probs = fallback / total
    else:
        probs = lagged / total
    out[multi] = rng.multinomial(remaining, probs)
    return out


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def observed_rows(corpus, weights, delta=DEFAULT_LOOKBACK):
    """Rows with observed fully-vaccinated counts that can enter the fit.

    Returns (fit_rows, constant_rows, excluded) where constant_rows are pure
    one-dose reports (no coefficient information) and excluded rows lack a
    usable context (logged).
    """
    fit_rows, constant_rows, excluded = [], [], []
    for i in corpus.country_ids:
        view = corpus.view(i)
        for j in range(1, view.days.size + 1):
            y = view.cum_fully[j - 1]
            if np.isnan(y):
                continue
            try:
                ctx = recency_context(corpus, weights, i, j, delta)
            except (DegenerateWeights, ZeroWindow) as exc:
                excluded.append((i, j, str(exc)))
                continue
            row = CompletionRow(i, j, int(view.cum_doses[j - 1]), int(y), ctx)
            _, q2, q3 = ctx.type_shares
            if q2 == 0 and q3 == 0:
                constant_rows.append(row)
            elif (q2 > 0 and ctx.two_dose_scale <= 0) or (q3 > 0 and ctx.three_dose_scale <= 0):
                excluded.append((i, j, "undefined log argument (zero dose-mass scale)"))
            else:
                fit_rows.append(row)
    if excluded:
        log.warning("excluded %d observed fully-vaccinated row(s) without usable context", len(excluded))
    return fit_rows, constant_rows, excluded


@dataclass
class CompletionFitData:
    gap2: np.ndarray
    totals: np.ndarray
    q2: np.ndarray
    q3: np.ndarray
    log_scale2: np.ndarray  # 0 where q2 == 0
    log_scale3: np.ndarray
    rows: list

    def lam(self, intercept, slope) -> np.ndarray:
        lam = np.zeros(self.gap2.shape)
        with np.errstate(over="ignore"):
            m2 = self.q2 > 0
            lam[m2] = self.q2[m2] * (self.totals[m2] + np.exp(intercept + slope * self.log_scale2[m2]))
            m3 = self.q3 > 0
            lam[m3] += self.q3[m3] * (
                (4.0 / 3.0) * self.totals[m3]
                + (2.0 / 3.0) * np.exp(intercept + slope * self.log_scale3[m3])
            )
        return np.minimum(lam, _LAMBDA_CAP)

    def loglik(self, intercept, slope) -> float:
        if self.gap2.size == 0:
            return 0.0
        return float(np.sum(poisson_logpmf(self.gap2, self.lam(intercept, slope))))


def prepare_fit(rows) -> CompletionFitData:
    if not rows:
        return CompletionFitData(*(np.zeros(0),) * 6, rows=[])
    q2 = np.array([r.ctx.type_shares[1] for r in rows])
    q3 = np.array([r.ctx.type_shares[2] for r in rows])
    ls2 = np.array([np.log(r.ctx.two_dose_scale) if r.ctx.type_shares[1] > 0 else 0.0 for r in rows])
    ls3 = np.array([np.log(r.ctx.three_dose_scale) if r.ctx.type_shares[2] > 0 else 0.0 for r in rows])
    return CompletionFitData(
        gap2=np.array([r.gap2 for r in rows], dtype=float),
        totals=np.array([r.total_doses for r in rows], dtype=float),
        q2=q2,
        q3=q3,
        log_scale2=ls2,
        log_scale3=ls3,
        rows=list(rows),
    )


def _crude_start(fit_data: CompletionFitData):
    """Least-squares seed on log(excess gap) vs the share-weighted log scale."""
    base = fit_data.q2 * fit_data.totals + fit_data.q3 * (4.0 / 3.0) * fit_data.totals
    excess = np.maximum(fit_data.gap2 - base, 1.0)
    qsum = fit_data.q2 + fit_data.q3
    x = (fit_data.q2 * fit_data.log_scale2 + fit_data.q3 * fit_data.log_scale3) / np.maximum(qsum, 1e-12)
    y = np.log(excess)
    if x.size < 2 or np.allclose(x, x[0]):
        return 0.0, 1.0
    slope, intercept = np.polyfit(x, y, 1)
    return float(intercept), float(slope)


def _laplace_seed(fit_data: CompletionFitData):
    """Mode and curvature-based scales for chain initialization.

    The likelihood turns into a flat plateau once the exponential term
    underflows against the dose totals, so chains must start inside the
    informative basin; a short mode search plus a local Hessian gives both
    the start point and a well-scaled first proposal."""
    from scipy.optimize import minimize

    seed = _crude_start(fit_data)
    res = minimize(lambda v: -fit_data.loglik(v[0], v[1]), seed, method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 2000})
    mode = res.x if np.isfinite(res.fun) else np.asarray(seed)
    h = 1e-4
    hess = np.zeros((2, 2))
    f0 = fit_data.loglik(*mode)
    for a in range(2):
        for b in range(2):
            pa = np.zeros(2)
            pb = np.zeros(2)
            pa[a] = h
            pb[b] = h
            hess[a, b] = (
                fit_data.loglik(*(mode + pa + pb))
                - fit_data.loglik(*(mode + pa))
                - fit_data.loglik(*(mode + pb))
                + f0
            ) / h**2
    try:
        cov = np.linalg.inv(-hess)
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.diag([0.3, 0.1])
    return mode, chol


def build_completion_model(fit_data: CompletionFitData) -> ModelGraph:
    def logdensity(state):
        return fit_data.loglik(float(state["intercept"]), float(state["slope"]))

    def check():
        ok, witness = check_theorem2(fit_data.rows)
        if ok:
            return True, f"rows {witness[0]} and {witness[1]} have distinct log-scale regressors"
        return False, "fewer than two contributing rows with distinct regressors (Theorem-2-style condition)"

    mode, chol = _laplace_seed(fit_data)

    def draw_initial(rng):
        jitter = chol @ rng.standard_normal(2)
        return {"intercept": mode[0] + 2.0 * jitter[0], "slope": mode[1] + 2.0 * jitter[1]}

    return ModelGraph(
        nodes=[Node("intercept", (), Real()), Node("slope", (), Real())],
        logdensity=logdensity,
        blocks=[Block(names=("intercept", "slope"), init_scale=chol)],
        draw_initial=draw_initial,
        propriety_checks=[check],
        name="completion",
    )


def context_dump(corpus, weights, delta=DEFAULT_LOOKBACK) -> list:
    """Per-report context rows for the audit CSV."""
    out = []
    for i in corpus.country_ids:
        view = corpus.view(i)
        for j in range(1, view.days.size + 1):
            try:
                ctx = recency_context(corpus, weights, i, j, delta)
            except (DegenerateWeights, ZeroWindow):
                continue
            q1, q2, q3 = ctx.type_shares
            out.append(
                {
                    "country": corpus.codes[i],
                    "report": j,
                    "ref_report": 0 if ctx.ref_index is None else ctx.ref_index,
                    "daily_rate": ctx.daily_rate,
                    "two_dose_scale": ctx.two_dose_scale,
                    "three_dose_scale": ctx.three_dose_scale,
                    "share_one_dose": q1,
                    "share_two_dose": q2,
                    "share_three_dose": q3,
                }
            )
    return out
