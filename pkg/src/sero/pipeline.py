"""Stage-by-stage orchestration: ingest, fits, prediction, world aggregation.

Every stage persists its outputs under the run directory and can be re-run
standalone; run_pipeline executes them in order. The manifest records the
configuration echo, input hashes, derived seeds, clamp/repair counters, and
output hashes, and contains nothing time- or host-dependent, so a rerun with
the same seed is byte-identical.
"""

import csv
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, allocation, completion, efficacy, infection, vaccination
from .charts import line_chart_svg
from .corpus import (
    CorpusPaths,
    bundled_trials_path,
    default_catalog_path,
    ingest_corpus,
    load_catalog,
    write_corpus,
)
from .errors import (
    ConfigError,
    DateOutOfRange,
    EmptySupport,
    InvariantViolation,
    MissingCountryDraws,
)
from .mcmc import ChainConfig, PosteriorStore, run_chains
from .stats import round_half_even

log = logging.getLogger("sero.pipeline")

STAGES = (
    "ingest",
    "fit-allocation",
    "fit-completion",
    "fit-efficacy",
    "fit-infection",
    "predict",
    "aggregate",
    "report",
)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    paths: CorpusPaths
    catalog_path: Path
    chains: int = 4
    iters: int = 4000
    burnin: int = 2000
    seed: int = 20210731
    adapt_window: int = 50
    delta: int = 21
    accuracy_concentration: float = 200.0
    joint: bool = False
    out_dir: Path = Path("out")
    stride: int = 1
    draws: int = 2000
    svg: bool = False
    treemap_date: str | None = None
    allow_monotonic_repair: bool = False
    raw: dict = field(default_factory=dict)

    def chain_config(self, stage: str) -> ChainConfig:
        return ChainConfig(
            seed=derive_seed(self.seed, stage),
            n_chains=self.chains,
            n_iter=self.iters,
            n_burnin=self.burnin,
            adapt_window=self.adapt_window,
        )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    if "paths" not in raw:
        raise ConfigError("missing config key: paths")
    for key in ("vaccination", "delivery", "trials", "surveys", "countries"):
        if key not in raw["paths"]:
            raise ConfigError(f"missing config key: paths.{key}")
    paths = CorpusPaths(**{k: resolve(raw["paths"][k])
                           for k in ("vaccination", "delivery", "trials", "surveys", "countries")})
    catalog_path = resolve(raw["paths"].get("catalog", default_catalog_path()))
    mcmc = raw.get("mcmc", {})
    model = raw.get("model", {})
    output = raw.get("output", {})
    known = {"paths", "mcmc", "model", "output"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    out_dir = output.get("dir", "out")
    return PipelineConfig(
        paths=paths,
        catalog_path=catalog_path,
        chains=int(mcmc.get("chains", 4)),
        iters=int(mcmc.get("iters", 4000)),
        burnin=int(mcmc.get("burnin", 2000)),
        seed=int(mcmc.get("seed", 20210731)),
        adapt_window=int(mcmc.get("adapt_window", 50)),
        delta=int(model.get("delta", 21)),
        accuracy_concentration=float(model.get("accuracy_concentration", 200.0)),
        joint=bool(model.get("joint", False)),
        out_dir=Path(out_dir) if Path(out_dir).is_absolute() else base / out_dir,
        stride=int(output.get("stride", 1)),
        draws=int(output.get("draws", 2000)),
        svg=bool(output.get("svg", False)),
        treemap_date=output.get("treemap_date"),
        raw=raw,
    )


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def derive_rng(seed: int, *labels) -> np.random.Generator:
    digest = hashlib.sha256(("|".join(str(x) for x in labels) + f"|{seed}").encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64).copy()
    return np.random.Generator(np.random.Philox(key=key))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _manifest_path(out_dir):
    return Path(out_dir) / "manifest.json"


def read_manifest(out_dir) -> dict:
    p = _manifest_path(out_dir)
    if p.exists():
        return json.loads(p.read_text())
    return {}


def update_manifest(out_dir, updates: dict):
    manifest = read_manifest(out_dir)
    for key, value in updates.items():
        if key == "stages":
            manifest.setdefault("stages", {}).update(value)
        else:
            manifest[key] = value
    _manifest_path(out_dir).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _store_diag_summary(store: PosteriorStore) -> dict:
    rhats = [d["rhat"] for d in store.diagnostics.values() if d["rhat"] is not None and not d["degenerate"]]
    esss = [d["ess"] for d in store.diagnostics.values() if not d["degenerate"]]
    return {
        "max_rhat": max(rhats) if rhats else None,
        "min_ess": min(esss) if esss else None,
        "n_parameters": len(store.diagnostics),
    }


# ---------------------------------------------------------------------------
# shared stage inputs
# ---------------------------------------------------------------------------

def _corpus_dir(cfg):
    return cfg.out_dir / "corpus"


def load_run_corpus(cfg):
    d = _corpus_dir(cfg)
    if not (d / "vaccination.csv").exists():
        raise ConfigError("ingest stage has not run (no serialized corpus in the output directory)")
    catalog = load_catalog(d / "catalog.csv")
    return ingest_corpus(CorpusPaths.in_dir(d), catalog)


def _load_store(cfg, name):
    d = cfg.out_dir / name
    if not (d / "manifest.json").exists():
        raise ConfigError(f"stage {name!r} has not run yet")
    return PosteriorStore.load(d)


# ---------------------------------------------------------------------------
# stage: ingest
# ---------------------------------------------------------------------------

def stage_ingest(cfg: PipelineConfig) -> dict:
    catalog = load_catalog(cfg.catalog_path)
    corpus = ingest_corpus(cfg.paths, catalog, allow_monotonic_repair=cfg.allow_monotonic_repair)
    cdir = _corpus_dir(cfg)
    write_corpus(corpus, cdir)
    shutil.copyfile(cfg.catalog_path, cdir / "catalog.csv")
    (cfg.out_dir / "validation.json").write_text(json.dumps(corpus.validation, indent=2, sort_keys=True))
    inputs = {
        "vaccination": sha256_file(cfg.paths.vaccination),
        "delivery": sha256_file(cfg.paths.delivery),
        "trials": sha256_file(cfg.paths.trials),
        "surveys": sha256_file(cfg.paths.surveys),
        "countries": sha256_file(cfg.paths.countries),
        "catalog": sha256_file(cfg.catalog_path),
    }
    update_manifest(cfg.out_dir, {
        "config": cfg.raw,
        "seed": cfg.seed,
        "versions": {"sero": __version__, "numpy": np.__version__},
        "inputs": inputs,
        "covariate_standardization": corpus.covariate_constants,
        "stages": {"ingest": {
            "countries": len(corpus.country_ids),
            "reports": sum(len(r) for r in corpus.reports.values()),
            "surveys": len(corpus.surveys),
            "validation_entries": len(corpus.validation),
        }},
    })
    return {"corpus": corpus}


# ---------------------------------------------------------------------------
# stage: fit allocation
# ---------------------------------------------------------------------------

def stage_fit_allocation(cfg: PipelineConfig) -> dict:
    corpus = load_run_corpus(cfg)
    weights = allocation.build_weights(corpus)
    rows = allocation.observed_rows(corpus, weights)
    model = allocation.build_allocation_model(rows)
    store = run_chains(model, cfg.chain_config("allocation"))
    store.save(cfg.out_dir / "allocation")
    diag_rows = allocation.diagnostics_rows(corpus, weights)
    with open(cfg.out_dir / "allocation" / "diagnostics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["country", "report", "support_size", "off_support_observed"])
        w.writeheader()
        w.writerows(diag_rows)
    update_manifest(cfg.out_dir, {"stages": {"fit-allocation": {
        "seed": derive_seed(cfg.seed, "allocation"),
        "observed_rows": len(rows),
        **_store_diag_summary(store),
    }}})
    return {"store": store}


# ---------------------------------------------------------------------------
# stage: fit completion
# ---------------------------------------------------------------------------

def stage_fit_completion(cfg: PipelineConfig) -> dict:
    corpus = load_run_corpus(cfg)
    weights = allocation.build_weights(corpus)
    fit_rows, constant_rows, excluded = completion.observed_rows(corpus, weights, cfg.delta)
    data = completion.prepare_fit(fit_rows)
    model = completion.build_completion_model(data)
    store = run_chains(model, cfg.chain_config("completion"))
    store.save(cfg.out_dir / "completion")
    dump = completion.context_dump(corpus, weights, cfg.delta)
    with open(cfg.out_dir / "completion" / "contexts.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(dump[0].keys()) if dump else ["country"])
        w.writeheader()
        w.writerows(dump)
    update_manifest(cfg.out_dir, {"stages": {"fit-completion": {
        "seed": derive_seed(cfg.seed, "completion"),
        "fit_rows": len(fit_rows),
        "constant_rows": len(constant_rows),
        "excluded_rows": len(excluded),
        **_store_diag_summary(store),
    }}})
    return {"store": store}


# ---------------------------------------------------------------------------
# stage: fit efficacy
# ---------------------------------------------------------------------------

def stage_fit_efficacy(cfg: PipelineConfig) -> dict:
    corpus = load_run_corpus(cfg)
    fit = efficacy.fit_efficacy(
        corpus.catalog, corpus.trials, n_draws=max(cfg.draws, 4000),
        seed=derive_seed(cfg.seed, "efficacy"),
    )
    edir = cfg.out_dir / "efficacy"
    edir.mkdir(parents=True, exist_ok=True)
    (edir / "efficacy_summary.json").write_text(json.dumps(fit.summary(), indent=2, sort_keys=True))
    for name, group in fit.groups.items():
        for (mfr, stage), draws in group.posterior_samples.items():
            fname = f"samples_{mfr.replace(' ', '_')}_d{stage}.npy"
            np.save(edir / fname, draws)
    update_manifest(cfg.out_dir, {"stages": {"fit-efficacy": {
        "seed": derive_seed(cfg.seed, "efficacy"),
        "groups": {n: {"alpha": g.alpha, "beta": g.beta} for n, g in fit.groups.items()},
    }}})
    return {"fit": fit}


def _load_efficacy_fit(cfg, corpus):
    # deterministic refit from the corpus (cheap) rather than deserializing
    return efficacy.fit_efficacy(
        corpus.catalog, corpus.trials, n_draws=max(cfg.draws, 4000),
        seed=derive_seed(cfg.seed, "efficacy"),
    )


# ---------------------------------------------------------------------------
# vaccination-side imputation machinery
# ---------------------------------------------------------------------------

def _completion_mean_vec(totals, ctx, b0, b1):
    """Vectorized Eq.-style mean over parameter draws for one report; a zero
    dose-mass scale with positive share uses the slope>0 limit (no extra term)."""
    _, q2, q3 = ctx.type_shares
    lam = np.zeros(b0.shape)
    if q2 > 0:
        if ctx.two_dose_scale > 0:
            lam += q2 * (totals + np.exp(b0 + b1 * np.log(ctx.two_dose_scale)))
        else:
            lam += q2 * totals
    if q3 > 0:
        if ctx.three_dose_scale > 0:
            lam += q3 * ((4.0 / 3.0) * totals + (2.0 / 3.0) * np.exp(b0 + b1 * np.log(ctx.three_dose_scale)))
        else:
            lam += q3 * (4.0 / 3.0) * totals
    return np.minimum(lam, 1e12)


def sample_country_effective(corpus, weights, country_id, alloc_draws, b0_draws, b1_draws,
                             eff_draws, rng, counters, delta=21):
    """Effectively vaccinated counts per (parameter draw, report) for one country.

    Missing per-vaccine splits and fully-vaccinated totals are imputed fresh
    for every parameter draw; observed values are held fixed.
    Returns (n_draws, J) int array.
    """
    view = corpus.view(country_id)
    n = alloc_draws.shape[0]
    j_count = view.days.size
    k_count = corpus.n_vaccines
    if j_count == 0:
        return np.zeros((n, 0), dtype=np.int64)
    vtypes = corpus.required_doses()
    intervals = corpus.intervals()
    shares_row = corpus.shares.get(country_id)
    eff_full = np.stack([eff_draws[k]["full"] for k in range(1, k_count + 1)], axis=1)
    eff_partial = np.stack([eff_draws[k]["partial"] for k in range(1, k_count + 1)], axis=1)

    splits = np.zeros((n, j_count, k_count), dtype=np.int64)
    fully = np.zeros((n, j_count), dtype=np.int64)
    contexts = {}
    for j in range(1, j_count + 1):
        x_j = int(view.cum_doses[j - 1])
        if view.split_observed[j - 1]:
            splits[:, j - 1, :] = np.round(view.split[j - 1]).astype(np.int64)
        elif x_j == 0:
            pass
        else:
            w_row = weights.w[country_id][j - 1]
            support = w_row > 0
            if not np.any(support):
                raise EmptySupport(
                    f"country {corpus.codes[country_id]} report {j}: positive doses with empty support"
                )
            logits = alloc_draws[:, None] * np.where(support, np.log(np.where(support, w_row, 1.0)), 0.0)[None, :]
            logits = np.where(support[None, :], logits, -np.inf)
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            splits[:, j - 1, :] = rng.multinomial(x_j, probs)

        ctx = completion.recency_context(corpus, weights, country_id, j, delta)
        contexts[j] = ctx
        if not np.isnan(view.cum_fully[j - 1]):
            fully[:, j - 1] = int(view.cum_fully[j - 1])
        else:
            lam = _completion_mean_vec(float(x_j), ctx, b0_draws, b1_draws)
            gap2 = rng.poisson(lam)
            odd = int(np.sum(gap2 % 2 == 1))
            if odd:
                counters["completion_odd_gap_rounded"] = counters.get("completion_odd_gap_rounded", 0) + odd
            y = x_j - round_half_even(gap2 / 2.0)
            clamped = int(np.sum((y < 0) | (y > x_j)))
            if clamped:
                counters["completion_clamped"] = counters.get("completion_clamped", 0) + clamped
            fully[:, j - 1] = np.clip(y, 0, x_j)

    # count parameter draws whose imputed per-vaccine cumulative series dips
    if j_count > 1:
        nonmono = np.any(np.diff(splits, axis=1) < 0, axis=(1, 2))
        if np.any(nonmono):
            counters["nonmonotone_split_draws"] = counters.get("nonmonotone_split_draws", 0) + int(nonmono.sum())

    one_dose = vtypes == 1
    multi = np.flatnonzero(~one_dose)
    m_counts = np.zeros((n, j_count), dtype=np.int64)
    for j in range(1, j_count + 1):
        split_j = splits[:, j - 1, :]
        y_split = np.zeros((n, k_count), dtype=np.int64)
        y_split[:, one_dose] = split_j[:, one_dose]
        one_dose_total = split_j[:, one_dose].sum(axis=1)
        y_j = fully[:, j - 1]
        raised = y_j < one_dose_total
        if np.any(raised):
            counters["fully_raised_to_one_dose"] = counters.get("fully_raised_to_one_dose", 0) + int(raised.sum())
            y_j = np.maximum(y_j, one_dose_total)
            fully[:, j - 1] = y_j
        remaining = y_j - one_dose_total
        if multi.size and np.any(remaining > 0):
            lagged = np.zeros((n, multi.size))
            for pos, k in enumerate(multi):
                ref = completion.closest_report_index(view.days, j, int(intervals[k])) if j >= 2 else j
                lagged[:, pos] = splits[:, ref - 1, k]
            totals = lagged.sum(axis=1)
            zero_rows = totals <= 0
            if np.any(zero_rows & (remaining > 0)):
                counters["split_zero_lagged"] = counters.get("split_zero_lagged", 0) + int((zero_rows & (remaining > 0)).sum())
                fallback = shares_row[multi] * view.in_use[j - 1][multi]
                if fallback.sum() > 0:
                    lagged[zero_rows] = fallback
                    totals = lagged.sum(axis=1)
                    zero_rows = totals <= 0
            still = zero_rows & (remaining > 0)
            if np.any(still):
                counters["split_unassignable"] = counters.get("split_unassignable", 0) + int(still.sum())
                fully[still, j - 1] -= remaining[still]
                remaining = np.where(still, 0, remaining)
            probs = lagged / np.maximum(totals, 1.0)[:, None]
            ok = totals > 0
            if np.any(ok):
                draws = rng.multinomial(remaining, np.where(ok[:, None], probs, 1.0 / max(multi.size, 1)))
                y_split[:, multi] = np.where(ok[:, None], draws, 0)
        basis = vaccination.partial_basis(split_j, y_split, vtypes[None, :], counters)
        from_full = rng.binomial(y_split, eff_full)
        from_partial = rng.binomial(basis, eff_partial)
        m_counts[:, j - 1] = from_full.sum(axis=1) + from_partial.sum(axis=1)
    return m_counts


def _posterior_param_draws(cfg, alloc_store, compl_store, n_out, label):
    rng = derive_rng(cfg.seed, "subsample", label)
    alloc = alloc_store.pooled("usage_coef")
    b0 = compl_store.pooled("intercept")
    b1 = compl_store.pooled("slope")
    idx_a = np.sort(rng.choice(alloc.shape[0], size=min(n_out, alloc.shape[0]), replace=False))
    idx_c = np.sort(rng.choice(b0.shape[0], size=min(n_out, b0.shape[0]), replace=False))
    return alloc[idx_a], b0[idx_c], b1[idx_c]


# ---------------------------------------------------------------------------
# stage: fit infection
# ---------------------------------------------------------------------------

def _survey_theta_v_bank(cfg, corpus, weights, design, alloc_store, compl_store, eff_fit, counters):
    """Bank of vaccine-seroprevalence prior draws per survey node (two-pass)."""
    n_bank = cfg.draws
    alloc_d, b0_d, b1_d = _posterior_param_draws(cfg, alloc_store, compl_store, n_bank, "theta-v-bank")
    n_bank = min(len(alloc_d), len(b0_d))
    alloc_d, b0_d, b1_d = alloc_d[:n_bank], b0_d[:n_bank], b1_d[:n_bank]
    eff_rng = derive_rng(cfg.seed, "theta-v-bank-eff")
    eff_draws = eff_fit.vaccine_draws(corpus.catalog, n_bank, eff_rng)
    bank = np.zeros((design.n_nodes, n_bank))
    by_country = {}
    for node_idx, (country_id, day) in enumerate(design.node_keys):
        view = corpus.view(country_id)
        j = vaccination.report_index_at(view.days, day)
        if j == 0:
            continue
        if country_id not in by_country:
            rng = derive_rng(cfg.seed, "theta-v-bank", corpus.codes[country_id])
            by_country[country_id] = sample_country_effective(
                corpus, weights, country_id, alloc_d, b0_d, b1_d, eff_draws, rng, counters, cfg.delta
            )
        population = corpus.stats[country_id].population
        bank[node_idx] = np.clip(by_country[country_id][:, j - 1] / population, 0.0, 1.0)
    return bank


def _joint_theta_v_refresher(cfg, corpus, weights, design, alloc_store, compl_store, eff_fit, counters):
    """Per-iteration vaccine-seroprevalence draw for the joint scheme: pick a
    random vaccination-side posterior index and impute fresh."""
    alloc = alloc_store.pooled("usage_coef")
    b0 = compl_store.pooled("intercept")
    b1 = compl_store.pooled("slope")
    n_pool = min(alloc.shape[0], b0.shape[0])
    eff_rng = derive_rng(cfg.seed, "joint-eff")
    eff_draws = eff_fit.vaccine_draws(corpus.catalog, n_pool, eff_rng)

    node_info = []
    for country_id, day in design.node_keys:
        view = corpus.view(country_id)
        j = vaccination.report_index_at(view.days, day)
        node_info.append((country_id, j, corpus.stats[country_id].population))

    def refresh(state, rng):
        out = np.zeros(design.n_nodes)
        r = int(rng.integers(n_pool))
        for node_idx, (country_id, j, population) in enumerate(node_info):
            if j == 0:
                continue
            m = sample_country_effective(
                corpus, weights, country_id,
                alloc[r:r + 1], b0[r:r + 1], b1[r:r + 1],
                {k: {"full": v["full"][r:r + 1], "partial": v["partial"][r:r + 1]}
                 for k, v in eff_draws.items()},
                rng, counters, cfg.delta,
            )
            out[node_idx] = min(m[0, j - 1] / population, 1.0)
        return out

    return refresh


def stage_fit_infection(cfg: PipelineConfig) -> dict:
    corpus = load_run_corpus(cfg)
    weights = allocation.build_weights(corpus)
    alloc_store = _load_store(cfg, "allocation")
    compl_store = _load_store(cfg, "completion")
    eff_fit = _load_efficacy_fit(cfg, corpus)
    counters = {}
    design = infection.prepare_design(corpus, cfg.accuracy_concentration)
    if cfg.joint:
        refresher = _joint_theta_v_refresher(cfg, corpus, weights, design, alloc_store, compl_store, eff_fit, counters)
        model = infection.build_posterior(design, theta_v_refresh=refresher)
        scheme = "joint"
    else:
        design.theta_v_bank = _survey_theta_v_bank(cfg, corpus, weights, design, alloc_store, compl_store, eff_fit, counters)
        model = infection.build_posterior(design)
        scheme = "two-pass"
    store = run_chains(model, cfg.chain_config("infection"), extra_manifest=design.metadata())
    store.save(cfg.out_dir / "infection")
    update_manifest(cfg.out_dir, {"stages": {"fit-infection": {
        "seed": derive_seed(cfg.seed, "infection"),
        "scheme": scheme,
        "surveys": design.n_surveys,
        "nodes": design.n_nodes,
        "excluded_surveys": design.excluded,
        "counters": counters,
        **_store_diag_summary(store),
    }}})
    return {"store": store, "design": design}


# ---------------------------------------------------------------------------
# stage: predict
# ---------------------------------------------------------------------------

def _grid_days(cfg, corpus):
    return list(range(0, corpus.last_day + 1, cfg.stride))


def _design_from_store(corpus, cfg, store):
    design = infection.prepare_design(corpus, cfg.accuracy_concentration)
    # sanity: node layout must match what the fit recorded
    recorded = store.manifest.get("node_keys")
    current = [[int(i), int(d)] for i, d in design.node_keys]
    if recorded is not None and recorded != current:
        raise InvariantViolation("survey design changed since the infection fit")
    return design


def stage_predict(cfg: PipelineConfig) -> dict:
    corpus = load_run_corpus(cfg)
    weights = allocation.build_weights(corpus)
    alloc_store = _load_store(cfg, "allocation")
    compl_store = _load_store(cfg, "completion")
    inf_store = _load_store(cfg, "infection")
    eff_fit = _load_efficacy_fit(cfg, corpus)
    design = _design_from_store(corpus, cfg, inf_store)
    counters = {}
    grid = _grid_days(cfg, corpus)
    horizon = grid[-1]
    pdir = cfg.out_dir / "predict"
    pdir.mkdir(parents=True, exist_ok=True)

    n_out = min(cfg.draws, inf_store.n_chains * inf_store.n_kept)
    alloc_d, b0_d, b1_d = _posterior_param_draws(cfg, alloc_store, compl_store, n_out, "predict")
    n_out = min(len(alloc_d), len(b0_d))
    idx_rng = derive_rng(cfg.seed, "subsample", "predict-infection")
    inf_idx = np.sort(idx_rng.choice(inf_store.n_chains * inf_store.n_kept, size=n_out, replace=False))
    eff_rng = derive_rng(cfg.seed, "predict-eff")
    eff_draws = eff_fit.vaccine_draws(corpus.catalog, n_out, eff_rng)

    grid_arr = np.array(grid)
    for country_id in corpus.country_ids:
        code = corpus.codes[country_id]
        view = corpus.view(country_id)
        if view.days.size:
            rng = derive_rng(cfg.seed, "predict-vacc", code)
            m_counts = sample_country_effective(
                corpus, weights, country_id, alloc_d, b0_d, b1_d, eff_draws, rng, counters, cfg.delta
            )
            cols = np.searchsorted(view.days, grid_arr, side="right")
            theta_v = np.zeros((n_out, len(grid)))
            nonzero = cols > 0
            theta_v[:, nonzero] = m_counts[:, cols[nonzero] - 1] / corpus.stats[country_id].population
            over = theta_v > 1.0
            if np.any(over):
                counters["theta_v_clamped"] = counters.get("theta_v_clamped", 0) + int(over.sum())
                theta_v = np.clip(theta_v, 0.0, 1.0)
        else:
            theta_v = np.zeros((n_out, len(grid)))
        rng_i = derive_rng(cfg.seed, "predict-inf", code)
        theta_i = infection.predict_theta_i(corpus, inf_store, design, country_id, grid, horizon, rng_i, draw_idx=inf_idx)
        np.save(pdir / f"theta_v_{code}.npy", theta_v)
        np.save(pdir / f"theta_i_{code}.npy", theta_i)
    (pdir / "grid.json").write_text(json.dumps({
        "days": grid,
        "dates": [corpus.date_of(d).isoformat() for d in grid],
        "draws": n_out,
    }))
    update_manifest(cfg.out_dir, {"stages": {"predict": {
        "draws": int(n_out),
        "grid_points": len(grid),
        "stride": cfg.stride,
        "counters": counters,
    }}})
    return {"grid": grid, "draws": n_out}


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class WorldTrend:
    days: list
    theta_v: np.ndarray  # (draws, T) population-weighted means
    theta_i: np.ndarray
    theta: np.ndarray
    summaries: dict      # series -> {"mean": (T,), "lo": (T,), "hi": (T,)}


def world_trend(theta_v_by_country, theta_i_by_country, populations, days) -> WorldTrend:
    """Population-weighted world trends per draw and date, with mean and
    central 95% summaries."""
    total_pop = float(sum(populations.values()))
    first = next(iter(theta_v_by_country.values()))
    tv = np.zeros_like(first)
    ti = np.zeros_like(first)
    tt = np.zeros_like(first)
    for country, pop in populations.items():
        if country not in theta_v_by_country or country not in theta_i_by_country:
            raise MissingCountryDraws(f"country {country} lacks predicted draws")
        v = theta_v_by_country[country]
        i = theta_i_by_country[country]
        tv += pop * v
        ti += pop * i
        tt += pop * infection.combine_seroprevalence(v, i)
    tv /= total_pop
    ti /= total_pop
    tt /= total_pop
    summaries = {}
    for name, arr in (("theta_v", tv), ("theta_i", ti), ("theta", tt)):
        summaries[name] = {
            "mean": arr.mean(axis=0),
            "lo": np.percentile(arr, 2.5, axis=0),
            "hi": np.percentile(arr, 97.5, axis=0),
        }
    return WorldTrend(days=list(days), theta_v=tv, theta_i=ti, theta=tt, summaries=summaries)


def _load_predictions(cfg, corpus):
    pdir = cfg.out_dir / "predict"
    if not (pdir / "grid.json").exists():
        raise ConfigError("predict stage has not run yet")
    grid = json.loads((pdir / "grid.json").read_text())
    theta_v = {}
    theta_i = {}
    for country_id in corpus.country_ids:
        code = corpus.codes[country_id]
        theta_v[code] = np.load(pdir / f"theta_v_{code}.npy")
        theta_i[code] = np.load(pdir / f"theta_i_{code}.npy")
    return grid, theta_v, theta_i


def stage_aggregate(cfg: PipelineConfig) -> dict:
    corpus = load_run_corpus(cfg)
    grid, theta_v, theta_i = _load_predictions(cfg, corpus)
    populations = {corpus.codes[i]: corpus.stats[i].population for i in corpus.country_ids}
    trend = world_trend(theta_v, theta_i, populations, grid["days"])
    trend_path = cfg.out_dir / "trend.csv"
    with open(trend_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([
            "date",
            "theta_v_mean", "theta_v_lo", "theta_v_hi",
            "theta_i_mean", "theta_i_lo", "theta_i_hi",
            "theta_mean", "theta_lo", "theta_hi",
        ])
        for t, date in enumerate(grid["dates"]):
            row = [date]
            for series in ("theta_v", "theta_i", "theta"):
                s = trend.summaries[series]
                row.extend([repr(float(s["mean"][t])), repr(float(s["lo"][t])), repr(float(s["hi"][t]))])
            w.writerow(row)
    update_manifest(cfg.out_dir, {"stages": {"aggregate": {
        "trend_csv_sha256": sha256_file(trend_path),
        "dates": len(grid["days"]),
    }}})
    return {"trend": trend, "grid": grid}


def treemap_export(corpus, theta_mean_by_country, date_iso) -> list:
    """Per-country posterior-mean records for the treemap, sorted by
    population descending."""
    records = []
    for country_id in corpus.country_ids:
        code = corpus.codes[country_id]
        value = float(theta_mean_by_country[code])
        if not 0.0 <= value <= 1.0:
            raise InvariantViolation(f"treemap value {value} for {code} outside [0,1]")
        records.append({
            "country": code,
            "population": corpus.stats[country_id].population,
            "seroprevalence_mean": value,
            "date": date_iso,
        })
    records.sort(key=lambda r: (-r["population"], r["country"]))
    return records


def stage_report(cfg: PipelineConfig) -> dict:
    corpus = load_run_corpus(cfg)
    grid, theta_v, theta_i = _load_predictions(cfg, corpus)
    manifest = read_manifest(cfg.out_dir)
    dates = grid["dates"]
    days = grid["days"]

    if cfg.treemap_date is not None:
        if cfg.treemap_date not in dates:
            raise DateOutOfRange(f"treemap_date {cfg.treemap_date} not on the prediction grid")
        t_idx = dates.index(cfg.treemap_date)
    else:
        t_idx = len(dates) - 1

    theta_mean = {}
    summary = {}
    for country_id in corpus.country_ids:
        code = corpus.codes[country_id]
        tv = theta_v[code]
        ti = theta_i[code]
        tt = infection.combine_seroprevalence(tv, ti)
        theta_mean[code] = float(tt[:, t_idx].mean())
        summary[code] = {
            "population": corpus.stats[country_id].population,
            "date": dates[-1],
            "theta_v": {"mean": float(tv[:, -1].mean()),
                        "lo": float(np.percentile(tv[:, -1], 2.5)),
                        "hi": float(np.percentile(tv[:, -1], 97.5))},
            "theta_i": {"mean": float(ti[:, -1].mean()),
                        "lo": float(np.percentile(ti[:, -1], 2.5)),
                        "hi": float(np.percentile(ti[:, -1], 97.5))},
            "theta": {"mean": float(tt[:, -1].mean()),
                      "lo": float(np.percentile(tt[:, -1], 2.5)),
                      "hi": float(np.percentile(tt[:, -1], 97.5))},
        }
    records = treemap_export(corpus, theta_mean, dates[t_idx])
    with open(cfg.out_dir / "treemap.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["country", "population", "seroprevalence_mean", "date"])
        w.writeheader()
        for r in records:
            w.writerow({**r, "population": repr(float(r["population"])),
                        "seroprevalence_mean": repr(r["seroprevalence_mean"])})
    fit_summaries = {
        stage: {k: manifest.get("stages", {}).get(stage, {}).get(k)
                for k in ("max_rhat", "min_ess")}
        for stage in ("fit-allocation", "fit-completion", "fit-infection")
    }
    (cfg.out_dir / "country_summary.json").write_text(json.dumps({
        "countries": summary,
        "fit_diagnostics": fit_summaries,
    }, indent=2, sort_keys=True))

    if cfg.svg:
        populations = {corpus.codes[i]: corpus.stats[i].population for i in corpus.country_ids}
        trend = world_trend(theta_v, theta_i, populations, days)
        for series, title in (("theta_v", "world vaccine-induced seroprevalence"),
                              ("theta_i", "world infection-induced seroprevalence"),
                              ("theta", "world seroprevalence")):
            s = trend.summaries[series]
            svg = line_chart_svg(days, s["mean"], s["lo"], s["hi"], title)
            (cfg.out_dir / f"trend_{series}.svg").write_text(svg)

    update_manifest(cfg.out_dir, {"stages": {"report": {
        "treemap_csv_sha256": sha256_file(cfg.out_dir / "treemap.csv"),
        "treemap_date": dates[t_idx],
        "svg": cfg.svg,
    }}})
    return {"summary": summary, "treemap": records}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

_STAGE_FN = {
    "ingest": stage_ingest,
    "fit-allocation": stage_fit_allocation,
    "fit-completion": stage_fit_completion,
    "fit-efficacy": stage_fit_efficacy,
    "fit-infection": stage_fit_infection,
    "predict": stage_predict,
    "aggregate": stage_aggregate,
    "report": stage_report,
}


def run_stage(cfg: PipelineConfig, stage: str) -> dict:
    if stage not in _STAGE_FN:
        raise ConfigError(f"unknown stage {stage!r}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    log.info("running stage %s", stage)
    return _STAGE_FN[stage](cfg)


class PipelineStageError(Exception):
    """Wraps a stage failure with the stage name; the original is the cause."""

    def __init__(self, stage, original):
        self.stage = stage
        self.original = original
        super().__init__(f"stage {stage!r} failed: {original}")


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute all stages in order; partial outputs of finished stages remain
    on failure, and completed stages are re-runnable individually."""
    results = {}
    for stage in STAGES:
        try:
            results[stage] = run_stage(cfg, stage)
        except Exception as exc:
            raise PipelineStageError(stage, exc) from exc
    return results
