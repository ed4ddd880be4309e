"""Sample the effectively vaccinated count per report and evaluate the
vaccine-induced seroprevalence as a step function of date."""

import logging
from dataclasses import dataclass

import numpy as np

from .stats import round_half_even

log = logging.getLogger("sero.vaccination")


@dataclass(frozen=True)
class EffectiveVaccinationDraw:
    country_id: int
    report_index: int
    count: int
    components: tuple  # per vaccine (from_full, from_partial)


def partial_basis(doses_k, fully_k, required_doses_k, counters=None):
    """People with a started but unfinished course: (2/d)(X - d Y), rounded
    half-to-even; negative values (imputation noise) clamp to zero."""
    raw = (2.0 / required_doses_k) * (doses_k - required_doses_k * fully_k)
    value = round_half_even(raw)
    clamped = np.maximum(value, 0)
    n_neg = int(np.sum(np.asarray(value) < 0))
    if n_neg and counters is not None:
        counters["negative_partial_basis"] = counters.get("negative_partial_basis", 0) + n_neg
    return clamped


def sample_effective_count(doses_row, fully_row, eff_full, eff_partial, required_doses, rng, counters=None):
    """One draw of the effectively vaccinated count at a report.

    Per vaccine: fully vaccinated thinned by full efficacy plus partially
    vaccinated thinned by partial efficacy, summed.
    """
    doses_row = np.asarray(doses_row, dtype=np.int64)
    fully_row = np.asarray(fully_row, dtype=np.int64)
    basis = partial_basis(doses_row, fully_row, np.asarray(required_doses), counters)
    from_full = rng.binomial(fully_row, eff_full)
    from_partial = rng.binomial(basis, eff_partial)
    total = int(from_full.sum() + from_partial.sum())
    return total, from_full, from_partial


def report_index_at(days, t):
    """Most recent report index (1-based) at or before day t, or 0 if none."""
    return int(np.searchsorted(np.asarray(days), t, side="right"))


def theta_v(effective_draws, days, population, t, counters=None):
    """Vaccine-induced seroprevalence at day t for one country: step function
    over report dates, per posterior draw.

    effective_draws: (n_draws, J) effectively vaccinated counts per report.
    Returns (n_draws,) values in [0, 1]; zero before the first report.
    """
    j = report_index_at(days, t)
    n = effective_draws.shape[0]
    if j == 0:
        return np.zeros(n)
    values = effective_draws[:, j - 1] / population
    over = values > 1.0
    if np.any(over) and counters is not None:
        counters["theta_v_clamped"] = counters.get("theta_v_clamped", 0) + int(over.sum())
    return np.clip(values, 0.0, 1.0)
