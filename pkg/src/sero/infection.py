"""Hierarchical serosurvey model for infection-induced seroprevalence.

Each survey's positive count is binomial in the apparent prevalence, which
combines vaccine- and infection-induced seroprevalence through the test's
sensitivity and specificity. The infection part is parameterized by the log
ratio of infection seroprevalence to the confirmed ratio, truncated-normal on
(0, -log confirmed ratio) so the implied seroprevalence stays in
(confirmed ratio, 1]; its mean carries a country random effect plus
standardized log population density and log GDP effects.

Vaccine-induced seroprevalence enters as a per-sweep draw from its own
posterior-predictive bank (two-pass) or a caller-supplied sampler (joint).
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NonpositiveBound, NoSurveys
from .mcmc import Block, Interval, ModelGraph, Node, Positive, Real, Refresher, UnitInterval
from .stats import binom_logpmf, beta_logpdf, normal_logpdf, truncnorm_logpdf, truncnorm_rvs

log = logging.getLogger("sero.infection")

DEFAULT_ACCURACY_CONCENTRATION = 200.0

# Scale parameters carry uniform(0, A) priors with generous finite bounds
# (the bounded-uniform form of the flat-prior recommendation). Unbounded
# flatness is untenable here: as the ratio-noise scale grows the truncated
# normal flattens toward a fixed uniform density over its interval, which
# both makes the posterior improper in that direction and decouples the
# country effects from the data (opening the funnel at zero effect scale).
# Log ratios live in (0, -log confirmed ratio), a few units at most, so
# scales of 2-3 already describe implausibly wild scatter.
RATIO_SD_MAX = 2.0
EFFECT_SD_MAX = 3.0


def apparent_prevalence(theta, p_plus, p_minus):
    """Probability of a positive test: sensitivity on the seropositive part,
    one minus specificity on the rest."""
    theta = np.asarray(theta, dtype=float)
    return p_plus * theta + (1.0 - p_minus) * (1.0 - theta)


def combine_seroprevalence(theta_v, theta_i):
    """Overall seroprevalence from the vaccinated and infected parts; the
    overlap term counts infected people who were also vaccinated."""
    tv = np.asarray(theta_v, dtype=float)
    ti = np.asarray(theta_i, dtype=float)
    return tv + ti - tv * ti


def ratio_logdensity(log_ratio, mean, tau, upper_bound):
    """Truncated-normal log density of the log infection-to-confirmed ratio on
    (0, upper_bound), where upper_bound = -log(confirmed ratio)."""
    upper_bound = np.asarray(upper_bound, dtype=float)
    if np.any(upper_bound <= 0):
        raise NonpositiveBound("confirmed ratio >= 1 leaves no room for the ratio")
    return truncnorm_logpdf(log_ratio, mean, tau, 0.0, upper_bound)


def accuracy_prior(evidence, concentration=DEFAULT_ACCURACY_CONCENTRATION):
    """Beta prior parameters from validation counts (add-one smoothing) or a
    fixed value at the configured concentration."""
    if evidence.kind == "counts":
        return float(evidence.successes + 1), float(evidence.failures + 1)
    return concentration * evidence.value, concentration * (1.0 - evidence.value)


# ---------------------------------------------------------------------------
# design: prepared arrays for the sampler
# ---------------------------------------------------------------------------

@dataclass
class SurveyDesign:
    # per survey (length L)
    n_samples: np.ndarray
    n_positive: np.ndarray
    node_of_survey: np.ndarray
    sens_prior: np.ndarray     # (L, 2)
    spec_prior: np.ndarray
    sens_fixed: np.ndarray     # point values used when accuracy is fixed
    spec_fixed: np.ndarray
    # per node = unique (country, day) (length m)
    node_keys: list            # (country_id, day)
    node_country: np.ndarray   # index into countries
    node_theta_c: np.ndarray
    node_bound: np.ndarray     # -log theta_c
    # per survey country (length C)
    country_ids: list
    country_pd: np.ndarray
    country_gdp: np.ndarray
    theta_v_bank: np.ndarray | None = None  # (m, n_bank) prior draws, zeros if None
    excluded: list = field(default_factory=list)

    @property
    def n_surveys(self):
        return int(self.n_samples.size)

    @property
    def n_nodes(self):
        return len(self.node_keys)

    @property
    def n_countries(self):
        return len(self.country_ids)

    def metadata(self):
        return {
            "node_keys": [[int(i), int(d)] for i, d in self.node_keys],
            "country_ids": [int(i) for i in self.country_ids],
            "excluded_surveys": self.excluded,
        }


def prepare_design(corpus, accuracy_concentration=DEFAULT_ACCURACY_CONCENTRATION,
                   theta_v_bank=None) -> SurveyDesign:
    """Index surveys into sampler-ready arrays. Surveys in countries with a
    zero confirmed ratio at the survey date cannot inform the ratio model and
    are excluded with a logged note."""
    if not corpus.surveys:
        raise NoSurveys("corpus has no serosurveys")
    usable = []
    excluded = []
    for s in corpus.surveys:
        theta_c = corpus.confirmed_ratio(s.country_id, s.end_date)
        if theta_c <= 0.0:
            excluded.append({"survey_id": s.survey_id, "reason": "zero confirmed ratio at survey date"})
            continue
        if theta_c >= 1.0:
            raise NonpositiveBound(f"survey {s.survey_id}: confirmed ratio {theta_c} >= 1")
        usable.append((s, theta_c))
    if excluded:
        log.warning("excluding %d survey(s) with zero confirmed ratio", len(excluded))
    if not usable:
        raise NoSurveys("no survey has a positive confirmed ratio")

    node_index = {}
    node_keys = []
    node_theta_c = []
    for s, theta_c in usable:
        key = (s.country_id, s.end_date)
        if key not in node_index:
            node_index[key] = len(node_keys)
            node_keys.append(key)
            node_theta_c.append(theta_c)
    country_ids = sorted({i for i, _ in node_keys})
    country_pos = {i: c for c, i in enumerate(country_ids)}

    sens_prior = np.array([accuracy_prior(s.sensitivity_evidence, accuracy_concentration) for s, _ in usable])
    spec_prior = np.array([accuracy_prior(s.specificity_evidence, accuracy_concentration) for s, _ in usable])

    def fixed_value(evidence):
        if evidence.kind == "fixed":
            return evidence.value
        return (evidence.successes + 1) / (evidence.successes + evidence.failures + 2)

    design = SurveyDesign(
        n_samples=np.array([s.n_samples for s, _ in usable], dtype=float),
        n_positive=np.array([s.n_positive for s, _ in usable], dtype=float),
        node_of_survey=np.array([node_index[(s.country_id, s.end_date)] for s, _ in usable]),
        sens_prior=sens_prior,
        spec_prior=spec_prior,
        sens_fixed=np.array([fixed_value(s.sensitivity_evidence) for s, _ in usable]),
        spec_fixed=np.array([fixed_value(s.specificity_evidence) for s, _ in usable]),
        node_keys=node_keys,
        node_country=np.array([country_pos[i] for i, _ in node_keys]),
        node_theta_c=np.array(node_theta_c),
        node_bound=-np.log(np.array(node_theta_c)),
        country_ids=country_ids,
        country_pd=np.array([corpus.covariates[i][0] for i in country_ids]),
        country_gdp=np.array([corpus.covariates[i][1] for i in country_ids]),
        theta_v_bank=theta_v_bank,
        excluded=excluded,
    )
    return design


# ---------------------------------------------------------------------------
# model graphs
# ---------------------------------------------------------------------------

def _theta_v_refresher(design, theta_v_refresh):
    m = design.n_nodes
    if theta_v_refresh is not None:
        return Refresher("theta_v", theta_v_refresh)
    bank = design.theta_v_bank
    if bank is None:
        zeros = np.zeros(m)
        return Refresher("theta_v", lambda state, rng: zeros)
    bank = np.asarray(bank, dtype=float)

    def draw(state, rng):
        idx = rng.integers(bank.shape[1], size=m)
        return bank[np.arange(m), idx]

    return Refresher("theta_v", draw)


def build_posterior(design: SurveyDesign, collapse_hierarchy=False, fix_accuracy=False,
                    theta_v_refresh=None) -> ModelGraph:
    """Model graph for the survey posterior.

    collapse_hierarchy replaces the truncated-normal hierarchy with a flat
    prior on each node's infection seroprevalence over (confirmed ratio, 1);
    used by oracle checks. fix_accuracy pins sensitivity and specificity at
    their point values instead of sampling them.
    """
    if design.n_surveys == 0:
        raise NoSurveys("design holds no surveys")
    m = design.n_nodes
    n_countries = design.n_countries
    node_of = design.node_of_survey
    theta_c = design.node_theta_c
    n_l = design.n_samples
    x_l = design.n_positive
    pd = design.country_pd
    gdp = design.country_gdp
    country_of = design.node_country
    sa, sb = design.sens_prior[:, 0], design.sens_prior[:, 1]
    ca, cb = design.spec_prior[:, 0], design.spec_prior[:, 1]

    def theta_i_of(state):
        if collapse_hierarchy:
            return state["theta_infected"]
        return theta_c * np.exp(state["log_ratio"])

    def sens_spec(state):
        if fix_accuracy:
            return design.sens_fixed, design.spec_fixed
        return state["sens"], state["spec"]

    def survey_ll(state):
        ti = theta_i_of(state)
        theta = combine_seroprevalence(state["theta_v"], ti)
        p_plus, p_minus = sens_spec(state)
        prob = apparent_prevalence(theta[node_of], p_plus, p_minus)
        prob = np.clip(prob, 1e-300, 1.0 - 1e-16)
        return binom_logpmf(x_l, n_l, prob)

    def survey_ll_by_node(state):
        out = np.zeros(m)
        np.add.at(out, node_of, survey_ll(state))
        return out

    nodes = [Node("theta_v", (m,), UnitInterval())]
    refreshers = [_theta_v_refresher(design, theta_v_refresh)]
    blocks = []

    if collapse_hierarchy:
        nodes.append(Node("theta_infected", (m,), Interval(theta_c, np.ones(m))))
        blocks.append(Block(names=("theta_infected",), kind="componentwise", logdensity=survey_ll_by_node))

        def logdensity(state):
            return float(np.sum(survey_ll(state)))

        def draw_initial(rng):
            u = rng.uniform(0.2, 0.8, size=m)
            return {
                "theta_infected": theta_c + u * (1.0 - theta_c),
                "theta_v": np.zeros(m),
                **({} if fix_accuracy else {
                    "sens": np.clip(rng.beta(sa, sb), 0.02, 0.98),
                    "spec": np.clip(rng.beta(ca, cb), 0.02, 0.98),
                }),
            }
    else:
        bound = design.node_bound
        # non-centered country effects: effect_c = mu0 + sigma * effect_raw_c
        # with standard-normal effect_raw, so a small effect scale is not a
        # density spike (funnel) for the random-walk updates
        nodes.extend([
            Node("log_ratio", (m,), Interval(np.zeros(m), bound)),
            Node("effect_raw", (n_countries,), Real()),
            Node("mu0", (), Real()),
            Node("sigma", (), Interval(0.0, EFFECT_SD_MAX)),
            Node("tau", (), Interval(0.0, RATIO_SD_MAX)),
            Node("density_coef", (), Real()),
            Node("gdp_coef", (), Real()),
        ])

        def effects(state):
            return float(state["mu0"]) + float(state["sigma"]) * state["effect_raw"]

        def tn_mean(state):
            return (effects(state)[country_of]
                    + float(state["density_coef"]) * pd[country_of]
                    + float(state["gdp_coef"]) * gdp[country_of])

        def tn_terms(state):
            return truncnorm_logpdf(state["log_ratio"], tn_mean(state), float(state["tau"]), 0.0, bound)

        def raw_terms(state):
            return normal_logpdf(state["effect_raw"], 0.0, 1.0)

        def ratio_local(state):
            return survey_ll_by_node(state) + tn_terms(state)

        def effect_local(state):
            out = np.zeros(n_countries)
            np.add.at(out, country_of, tn_terms(state))
            return out + raw_terms(state)

        def hyper_local(state):
            return float(np.sum(tn_terms(state)))

        blocks.extend([
            Block(names=("log_ratio",), kind="componentwise", logdensity=ratio_local),
            Block(names=("effect_raw",), kind="componentwise", logdensity=effect_local),
            Block(names=("mu0", "density_coef", "gdp_coef"), logdensity=hyper_local),
            Block(names=("sigma",), logdensity=hyper_local),
            Block(names=("tau",), logdensity=hyper_local),
        ])

        def logdensity(state):
            return float(np.sum(survey_ll(state)) + np.sum(tn_terms(state)) + np.sum(raw_terms(state)))

        # data-driven starting ratios: back out a crude infection share from
        # each survey's positive rate at the prior-mean test accuracy, then
        # seed the country effects from the same values so the hierarchy
        # starts internally consistent (a mismatched start inflates the
        # noise scale toward its uniform plateau and stalls adaptation)
        p_plus0 = design.sens_fixed
        p_minus0 = design.spec_fixed
        rate = design.n_positive / design.n_samples
        theta_hat = (rate + p_minus0 - 1.0) / np.maximum(p_plus0 + p_minus0 - 1.0, 1e-6)
        ratio_hat_l = np.log(np.clip(theta_hat, 1e-6, None) / theta_c[node_of])
        ratio_seed = np.zeros(m)
        np.add.at(ratio_seed, node_of, ratio_hat_l)
        counts = np.zeros(m)
        np.add.at(counts, node_of, 1.0)
        ratio_seed /= counts
        ratio_seed = np.clip(ratio_seed, 0.05 * bound, np.minimum(0.95 * bound, bound - 1e-6))
        effect_seed = np.zeros(n_countries)
        np.add.at(effect_seed, country_of, ratio_seed)
        ncounts = np.zeros(n_countries)
        np.add.at(ncounts, country_of, 1.0)
        effect_seed /= ncounts

        def draw_initial(rng):
            jitter = rng.uniform(0.9, 1.1, size=m)
            mu0_init = float(effect_seed.mean()) + rng.normal(0.0, 0.2)
            sigma_init = float(rng.uniform(0.2, 0.8))
            state = {
                "log_ratio": np.clip(ratio_seed * jitter, 1e-6, bound - 1e-6),
                "effect_raw": (effect_seed - mu0_init) / sigma_init + rng.normal(0.0, 0.1, size=n_countries),
                "mu0": mu0_init,
                "sigma": sigma_init,
                "tau": rng.uniform(0.2, 0.8),
                "density_coef": rng.normal(0.0, 0.2),
                "gdp_coef": rng.normal(0.0, 0.2),
                "theta_v": np.zeros(m),
            }
            if not fix_accuracy:
                state["sens"] = np.clip(rng.beta(sa, sb), 0.02, 0.98)
                state["spec"] = np.clip(rng.beta(ca, cb), 0.02, 0.98)
            return state

    if not fix_accuracy:
        nodes.append(Node("sens", (design.n_surveys,), UnitInterval()))
        nodes.append(Node("spec", (design.n_surveys,), UnitInterval()))

        def sens_local(state):
            return survey_ll(state) + beta_logpdf(state["sens"], sa, sb)

        def spec_local(state):
            return survey_ll(state) + beta_logpdf(state["spec"], ca, cb)

        blocks.append(Block(names=("sens",), kind="componentwise", logdensity=sens_local))
        blocks.append(Block(names=("spec",), kind="componentwise", logdensity=spec_local))

        base_logdensity = logdensity

        def logdensity(state):  # noqa: F811 - extends the prior-free version
            return (base_logdensity(state)
                    + float(np.sum(beta_logpdf(state["sens"], sa, sb)))
                    + float(np.sum(beta_logpdf(state["spec"], ca, cb))))

    return ModelGraph(
        nodes=nodes,
        logdensity=logdensity,
        blocks=blocks,
        refreshers=refreshers,
        draw_initial=draw_initial,
        name="infection-collapsed" if collapse_hierarchy else "infection",
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def country_effect_draws(store):
    """Per-country effect draws recovered from the non-centered nodes:
    effect = mu0 + sigma * effect_raw. Shape (pooled draws, countries)."""
    mu0 = store.pooled("mu0")
    sigma = store.pooled("sigma")
    raw = store.pooled("effect_raw")
    return mu0[:, None] + sigma[:, None] * raw


def predict_theta_i(corpus, store, design, country_id, grid_days, horizon_day, rng, draw_idx=None):
    """Infection-seroprevalence draws for one country on a date grid.

    One log ratio per posterior draw, with the truncation bound taken at the
    horizon date so the whole trajectory respects the unit bound; survey
    countries reuse their fitted random effect, others draw one from the
    population distribution.
    """
    theta_c_grid = np.array([corpus.confirmed_ratio(country_id, d) for d in grid_days])
    theta_c_hor = corpus.confirmed_ratio(country_id, int(horizon_day))
    mu0 = store.pooled("mu0")
    if draw_idx is None:
        draw_idx = np.arange(mu0.shape[0])
    n = len(draw_idx)
    if theta_c_hor <= 0.0:
        return np.zeros((n, len(grid_days)))
    if theta_c_hor >= 1.0:
        raise NonpositiveBound(f"confirmed ratio {theta_c_hor} >= 1 at the horizon")
    bound = -np.log(theta_c_hor)

    mu0 = mu0[draw_idx]
    sigma = store.pooled("sigma")[draw_idx]
    tau = store.pooled("tau")[draw_idx]
    b_pd = store.pooled("density_coef")[draw_idx]
    b_gdp = store.pooled("gdp_coef")[draw_idx]
    if country_id in design.country_ids:
        c = design.country_ids.index(country_id)
        effect = mu0 + sigma * store.pooled("effect_raw")[draw_idx, c]
    else:
        effect = rng.normal(mu0, sigma)
    pd_i, gdp_i = corpus.covariates[country_id]
    mean = effect + b_pd * pd_i + b_gdp * gdp_i
    ratio = truncnorm_rvs(mean, tau, 0.0, bound, rng, size=n)
    return np.exp(ratio)[:, None] * theta_c_grid[None, :]
