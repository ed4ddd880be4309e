"""Multinomial model for the per-vaccine split of cumulative doses.

Weights combine delivery shares with newly administered doses and the set of
vaccines in use; a single global coefficient links log-weights to usage
probabilities. The flat-prior posterior is proper iff some observed report has
at least two positive counts on its support, which is checked before fitting.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import EmptySupport
from .mcmc import Block, ModelGraph, Node, Real

log = logging.getLogger("sero.allocation")


@dataclass(frozen=True)
class AllocationWeights:
    """Per-country weight tensors: dw increments and their running sums."""

    dw: dict  # country_id -> (J, K) array
    w: dict   # country_id -> (J, K) array, nondecreasing in j

    def support(self, country_id, report_index):
        return np.flatnonzero(self.w[country_id][report_index - 1] > 0) + 1


def build_weights(corpus, shares=None) -> AllocationWeights:
    """dw[j,k] = share[k] * (X_j - X_{j-1}) * [vaccine k in use at j], w = cumsum."""
    shares = shares if shares is not None else corpus.shares
    dw = {}
    w = {}
    for i in corpus.country_ids:
        view = corpus.view(i)
        if view.days.size == 0:
            dw[i] = np.zeros((0, corpus.n_vaccines))
            w[i] = np.zeros((0, corpus.n_vaccines))
            continue
        s = shares.get(i)
        dx = np.diff(view.cum_doses, prepend=0.0)
        inc = s[None, :] * dx[:, None] * view.in_use
        dw[i] = inc
        w[i] = np.cumsum(inc, axis=0)
    return AllocationWeights(dw=dw, w=w)


def allocation_probs(w_row, usage_coef) -> np.ndarray:
    """Usage probabilities proportional to w^coef on the positive-weight support."""
    w_row = np.asarray(w_row, dtype=float)
    support = w_row > 0
    if not np.any(support):
        raise EmptySupport("no vaccine has positive weight at this report")
    logits = np.full(w_row.shape, -np.inf)
    logits[support] = usage_coef * np.log(w_row[support])
    p = np.exp(logits - logsumexp(logits))
    return p / p.sum()


@dataclass(frozen=True)
class ObservedSplitRow:
    country_id: int
    report_index: int
    counts: np.ndarray  # (K,) observed cumulative doses by vaccine
    w_row: np.ndarray   # (K,) weights at this report


def observed_rows(corpus, weights) -> list:
    rows = []
    for i in corpus.country_ids:
        view = corpus.view(i)
        for j in np.flatnonzero(view.split_observed):
            rows.append(
                ObservedSplitRow(
                    country_id=i,
                    report_index=int(j + 1),
                    counts=view.split[j].copy(),
                    w_row=weights.w[i][j].copy(),
                )
            )
    return rows


def partition_offsupport(rows):
    """Split rows into (usable, flagged) where flagged rows have positive
    observed counts for off-support vaccines; flagged rows would contribute
    -inf and are excluded from fitting with a warning."""
    good, flagged = [], []
    for row in rows:
        off = (row.counts > 0) & (row.w_row <= 0)
        if np.any(off):
            flagged.append(row)
        else:
            good.append(row)
    if flagged:
        where = [(r.country_id, r.report_index) for r in flagged]
        log.warning("excluding %d observed split row(s) with off-support positives: %s", len(flagged), where)
    return good, flagged


def _row_loglik(row, usage_coef):
    off = (row.counts > 0) & (row.w_row <= 0)
    if np.any(off):
        return -np.inf
    p = allocation_probs(row.w_row, usage_coef)
    n = row.counts.sum()
    mask = row.counts > 0
    coef = gammaln(n + 1) - gammaln(row.counts + 1).sum()
    return float(coef + np.sum(row.counts[mask] * np.log(p[mask])))


def allocation_loglik(rows, usage_coef) -> float:
    """Sum of multinomial log densities over observed rows. Rows with positive
    counts off support contribute -inf (and are reported via warning)."""
    good, flagged = partition_offsupport(rows)
    total = sum(_row_loglik(r, usage_coef) for r in good)
    return -np.inf if flagged else total


def check_theorem1(rows):
    """Posterior propriety under the flat prior: some row must have >= 2
    positive counts on its support. Returns (ok, witness)."""
    for row in rows:
        on_support = (row.w_row > 0) & (row.counts > 0)
        if int(on_support.sum()) >= 2:
            return True, (row.country_id, row.report_index)
    return False, None


def impute_doses(total, w_row, usage_coef, rng) -> np.ndarray:
    """Posterior-predictive multinomial split of a report's cumulative doses."""
    total = int(total)
    p = allocation_probs(w_row, usage_coef)
    if total == 0:
        return np.zeros(len(p), dtype=np.int64)
    return rng.multinomial(total, p)


@dataclass
class AllocationFitData:
    """Vectorized observed-row arrays for fast likelihood evaluation."""

    logw: np.ndarray       # (R, K), zero placeholder off support
    supported: np.ndarray  # (R, K) bool; the support never depends on the coefficient
    counts: np.ndarray     # (R, K), zero off support by construction
    totals: np.ndarray     # (R,)
    const: float           # multinomial coefficients, beta-independent
    cross: float           # sum of counts * logw over supported entries
    rows: list

    def loglik(self, usage_coef) -> float:
        if self.totals.size == 0:
            return 0.0
        logits = np.where(self.supported, usage_coef * self.logw, -np.inf)
        norms = logsumexp(logits, axis=1)
        return self.const + usage_coef * self.cross - float(self.totals @ norms)


def prepare_fit(rows) -> AllocationFitData:
    good, _ = partition_offsupport(rows)
    if not good:
        return AllocationFitData(
            logw=np.zeros((0, 0)), supported=np.zeros((0, 0), dtype=bool),
            counts=np.zeros((0, 0)), totals=np.zeros(0), const=0.0, cross=0.0, rows=[],
        )
    counts = np.stack([r.counts for r in good]).astype(float)
    w = np.stack([r.w_row for r in good]).astype(float)
    supported = w > 0
    logw = np.where(supported, np.log(np.where(supported, w, 1.0)), 0.0)
    totals = counts.sum(axis=1)
    const = float(np.sum(gammaln(totals + 1)) - np.sum(gammaln(counts + 1)))
    cross = float(np.sum(counts[supported] * logw[supported]))
    return AllocationFitData(
        logw=logw, supported=supported, counts=counts, totals=totals,
        const=const, cross=cross, rows=good,
    )


def build_allocation_model(rows) -> ModelGraph:
    """Flat-prior model over the usage coefficient, guarded by the propriety check."""
    data = prepare_fit(rows)

    def logdensity(state):
        return data.loglik(float(state["usage_coef"]))

    def check():
        ok, witness = check_theorem1(data.rows)
        if ok:
            return True, f"observed row {witness} has >= 2 positive on-support counts"
        return False, "no observed report has two positive on-support counts (Theorem-1-style condition)"

    return ModelGraph(
        nodes=[Node("usage_coef", (), Real())],
        logdensity=logdensity,
        blocks=[Block(names=("usage_coef",))],
        draw_initial=lambda rng: {"usage_coef": rng.normal(1.0, 1.0)},
        propriety_checks=[check],
        name="allocation",
    )


def diagnostics_rows(corpus, weights) -> list:
    """Per-report support summary for the audit CSV."""
    out = []
    for i in corpus.country_ids:
        view = corpus.view(i)
        for j in range(view.days.size):
            w_row = weights.w[i][j]
            support_size = int(np.sum(w_row > 0))
            off = False
            if view.split_observed[j]:
                off = bool(np.any((view.split[j] > 0) & (w_row <= 0)))
            out.append(
                {
                    "country": corpus.codes[i],
                    "report": j + 1,
                    "support_size": support_size,
                    "off_support_observed": off,
                }
            )
    return out
