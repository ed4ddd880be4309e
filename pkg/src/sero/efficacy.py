"""Hierarchical vaccine-efficacy estimation from clinical-trial tables.

Conditioning on the total case count in each trial removes the nuisance
expected-case parameter: the vaccinated-arm cases are binomial with success
probability g(E) = (1-E)r / (1 + (1-E)r), r the arm-size ratio. Efficacies
share a Beta prior per group (partially / fully vaccinated) whose
hyperparameters maximize the marginal likelihood; everything downstream is
one-dimensional and handled by deterministic quadrature.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import NonFiniteIntegrand, OptimizationFailed
from .mcmc import Block, ModelGraph, Node, Positive, UnitInterval
from .stats import beta_logpdf, binom_logpmf, poisson_logpmf

log = logging.getLogger("sero.efficacy")

DEFAULT_GRID = 4001  # midpoint cells on (0,1); spec floor is a 201-node rule

FULL_GROUP = "full"
PARTIAL_GROUP = "partial"


def _grid(n_cells):
    return (np.arange(n_cells) + 0.5) / n_cells


def arm_ratio(trial) -> float:
    return trial.size_vaccinated / trial.size_placebo


def success_prob(efficacy, ratio):
    """P(a case falls in the vaccinated arm), decreasing in efficacy."""
    q = (1.0 - np.asarray(efficacy, dtype=float)) * ratio
    return q / (1.0 + q)


def crude_efficacy(trial) -> float:
    """Point ratio estimate 1 - attack-rate ratio."""
    rate_v = trial.cases_vaccinated / trial.size_vaccinated
    rate_c = trial.cases_placebo / trial.size_placebo
    return 1.0 - rate_v / rate_c


def reduce_trial(trial):
    """Condition on the total case count: returns (n_total, n_vaccinated,
    success-probability function of efficacy). The expected-case nuisance
    parameter drops out of the efficacy marginal."""
    n_total = trial.cases_vaccinated + trial.cases_placebo
    ratio = arm_ratio(trial)
    return n_total, trial.cases_vaccinated, lambda e: success_prob(e, ratio)


def _trial_loglik_grid(trial, grid):
    n, k, g = reduce_trial(trial)
    return binom_logpmf(k, n, g(grid))


def marginal_loglik(trials, alpha, beta, n_cells=DEFAULT_GRID) -> float:
    """Sum over trials of log integral Binom(cases | total, g(E)) Beta(E) dE,
    by composite midpoint quadrature; deterministic."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("hyperparameters must be positive")
    if not trials:
        return 0.0
    grid = _grid(n_cells)
    prior = beta_logpdf(grid, alpha, beta)
    total = 0.0
    for t in trials:
        vals = _trial_loglik_grid(t, grid) + prior
        if np.any(np.isnan(vals)):
            raise NonFiniteIntegrand(f"NaN integrand for trial {t.manufacturer_name} d{t.dose_stage}")
        total += float(logsumexp(vals) - np.log(n_cells))
    return total


def fit_hyperparams(trials, n_cells=DEFAULT_GRID, n_starts_per_axis=3):
    """Empirical-Bayes maximizer of the marginal likelihood over (log a, log b),
    Nelder-Mead from a 3x3 log-grid of starts. Returns (alpha, beta, trace)."""
    if len(trials) < 2:
        raise OptimizationFailed("need at least two trials to fit hyperparameters")
    grid = _grid(n_cells)
    lik_rows = np.stack([_trial_loglik_grid(t, grid) for t in trials])
    log_cells = np.log(n_cells)

    def neg_marginal(v):
        a, b = np.exp(v)
        if not (np.isfinite(a) and np.isfinite(b)) or a <= 0 or b <= 0:
            return np.inf
        prior = beta_logpdf(grid, a, b)
        return -float(np.sum(logsumexp(lik_rows + prior, axis=1) - log_cells))

    starts = np.log([0.5, 5.0, 50.0][:n_starts_per_axis])
    best = None
    trace = []
    for la in starts:
        for lb in starts:
            res = minimize(neg_marginal, np.array([la, lb]), method="Nelder-Mead",
                           options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 2000})
            entry = {
                "start": [float(np.exp(la)), float(np.exp(lb))],
                "alpha": float(np.exp(res.x[0])),
                "beta": float(np.exp(res.x[1])),
                "loglik": -float(res.fun),
                "converged": bool(res.success),
            }
            trace.append(entry)
            if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
                best = res
    if best is None or not np.isfinite(best.fun):
        raise OptimizationFailed("no start produced a finite marginal likelihood")
    alpha, beta = np.exp(best.x)
    return float(alpha), float(beta), trace


def posterior_efficacy(trial, alpha, beta, n_draws, rng, n_cells=DEFAULT_GRID) -> np.ndarray:
    """Draws from the trial's efficacy posterior under the fitted Beta prior,
    via inverse CDF on the quadrature grid (piecewise-linear within cells)."""
    grid = _grid(n_cells)
    logdens = _trial_loglik_grid(trial, grid) + beta_logpdf(grid, alpha, beta)
    logdens -= logdens.max()
    mass = np.exp(logdens)
    mass /= mass.sum()
    edges = np.arange(n_cells + 1) / n_cells
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    cdf[-1] = 1.0
    u = rng.uniform(size=n_draws)
    draws = np.interp(u, cdf, edges)
    return np.clip(draws, 1e-12, 1.0 - 1e-12)


def posterior_mean_efficacy(trial, alpha, beta, n_cells=DEFAULT_GRID) -> float:
    grid = _grid(n_cells)
    logdens = _trial_loglik_grid(trial, grid) + beta_logpdf(grid, alpha, beta)
    logdens -= logdens.max()
    mass = np.exp(logdens)
    return float(np.sum(grid * mass) / mass.sum())


def efficacy_prior_for_unlisted(alpha, beta):
    """Sampler for vaccines without trial data: the fitted group Beta."""

    def draw(n_draws, rng):
        return np.clip(rng.beta(alpha, beta, size=n_draws), 1e-12, 1.0 - 1e-12)

    return draw


# ---------------------------------------------------------------------------
# groups and the full fit
# ---------------------------------------------------------------------------

@dataclass
class EfficacyGroup:
    group: str
    trials: tuple
    alpha: float
    beta: float
    posterior_samples: dict = field(default_factory=dict)  # (manufacturer, stage) -> draws
    trace: list = field(default_factory=list)

    def prior_draw(self, n_draws, rng):
        return efficacy_prior_for_unlisted(self.alpha, self.beta)(n_draws, rng)


def group_trials(catalog, trials):
    """Assign each trial to the fully- or partially-vaccinated group: a trial
    at the vaccine's required dose count estimates full efficacy."""
    required = {v.manufacturer_name: v.vtype for v in catalog}
    full, partial = [], []
    for t in trials:
        if t.manufacturer_name not in required:
            raise KeyError(f"trial manufacturer {t.manufacturer_name!r} not in the vaccine catalog")
        if t.dose_stage == required[t.manufacturer_name]:
            full.append(t)
        elif t.dose_stage < required[t.manufacturer_name]:
            partial.append(t)
        else:
            raise ValueError(
                f"trial {t.manufacturer_name} d{t.dose_stage} exceeds required doses"
            )
    return {FULL_GROUP: full, PARTIAL_GROUP: partial}


@dataclass
class EfficacyFit:
    groups: dict  # group name -> EfficacyGroup

    def samples(self, manufacturer, stage):
        for g in self.groups.values():
            key = (manufacturer, stage)
            if key in g.posterior_samples:
                return g.posterior_samples[key]
        return None

    def vaccine_draws(self, catalog, n_draws, rng):
        """Per-vaccine (full, partial) efficacy draws: trial posteriors where
        trials exist, fitted group priors otherwise."""
        out = {}
        full_g = self.groups[FULL_GROUP]
        part_g = self.groups[PARTIAL_GROUP]
        for v in catalog:
            full = self.samples(v.manufacturer_name, v.vtype)
            if full is None:
                full = full_g.prior_draw(n_draws, rng)
            else:
                full = full[rng.integers(full.shape[0], size=n_draws)]
            partial = None
            for stage in range(v.vtype - 1, 0, -1):
                partial = self.samples(v.manufacturer_name, stage)
                if partial is not None:
                    partial = partial[rng.integers(partial.shape[0], size=n_draws)]
                    break
            if partial is None:
                partial = part_g.prior_draw(n_draws, rng)
            out[v.vaccine_id] = {"full": full, "partial": partial}
        return out

    def summary(self):
        out = {"groups": {}, "trials": []}
        for name, g in self.groups.items():
            out["groups"][name] = {"alpha": g.alpha, "beta": g.beta,
                                   "prior_mean": g.alpha / (g.alpha + g.beta)}
            for (mfr, stage), draws in sorted(g.posterior_samples.items()):
                out["trials"].append(
                    {
                        "manufacturer": mfr,
                        "dose_stage": stage,
                        "group": name,
                        "mean": float(draws.mean()),
                        "lo": float(np.percentile(draws, 2.5)),
                        "hi": float(np.percentile(draws, 97.5)),
                    }
                )
        return out


def fit_efficacy(catalog, trials, n_draws=8000, seed=0, n_cells=DEFAULT_GRID) -> EfficacyFit:
    groups = group_trials(catalog, trials)
    fitted = {}
    for g_idx, name in enumerate(sorted(groups)):
        members = groups[name]
        alpha, beta, trace = fit_hyperparams(members, n_cells=n_cells)
        g = EfficacyGroup(group=name, trials=tuple(members), alpha=alpha, beta=beta, trace=trace)
        for idx, t in enumerate(members):
            rng = np.random.default_rng(np.random.SeedSequence((seed, g_idx, idx)))
            g.posterior_samples[(t.manufacturer_name, t.dose_stage)] = posterior_efficacy(
                t, alpha, beta, n_draws, rng, n_cells=n_cells
            )
        fitted[name] = g
    return EfficacyFit(groups=fitted)


# ---------------------------------------------------------------------------
# reference two-parameter model (expected-case nuisance kept explicit)
# ---------------------------------------------------------------------------

def build_poisson_trial_model(trial, alpha, beta, lam_prior=(1.0, 1.0)) -> ModelGraph:
    """The unreduced model: cases in each arm are Poisson with a shared total
    rate and an efficacy-controlled split, the total rate carrying a Gamma
    prior. Used to verify that the rate prior does not move the efficacy
    posterior."""
    ratio = arm_ratio(trial)
    n_v = trial.cases_vaccinated
    n_c = trial.cases_placebo
    a0, b0 = lam_prior

    def logdensity(state):
        e = float(state["efficacy"])
        lam = float(state["lam"])
        g = success_prob(e, ratio)
        ll = float(poisson_logpmf(n_v, lam * g) + poisson_logpmf(n_c, lam * (1.0 - g)))
        ll += float(beta_logpdf(e, alpha, beta))
        ll += (a0 - 1.0) * np.log(lam) - b0 * lam
        return ll

    def draw_initial(rng):
        return {"efficacy": rng.uniform(0.2, 0.9), "lam": max(n_v + n_c, 1) * rng.uniform(0.5, 2.0)}

    return ModelGraph(
        nodes=[Node("efficacy", (), UnitInterval()), Node("lam", (), Positive())],
        logdensity=logdensity,
        blocks=[Block(names=("efficacy",)), Block(names=("lam",))],
        draw_initial=draw_initial,
        name="trial-poisson",
    )
