"""Adaptive random-walk Metropolis-within-Gibbs with multi-chain execution.

Parameters live in named nodes with declared supports; proposals are made on
unconstrained scales (log / logit) with Jacobian corrections, so bounded and
positive parameters never leave their supports. Step sizes (and, for joint
multivariate blocks, proposal covariances) adapt during burn-in only.

Reproducibility contract: every random decision is drawn from a counter-based
Philox stream keyed by (seed, chain, iteration, block), so results are
bit-identical for identical (model, config, data) regardless of scheduling.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ImproperPosterior,
    InitializationFailed,
    InsufficientDraws,
    NonFiniteLogdensity,
)

TARGET_SCALAR = 0.44
TARGET_JOINT = 0.234

_INIT_EPOCH = 2**40  # iteration index space reserved for initialization draws


def substream(seed: int, chain: int, iteration: int, block: int) -> np.random.Generator:
    """Independent Philox stream for one (chain, iteration, block) decision."""
    key = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain),)).generate_state(2, np.uint64)
    bits = np.random.Philox(counter=[int(iteration), int(block), 0, 0], key=key)
    return np.random.Generator(bits)


# ---------------------------------------------------------------------------
# supports and transforms
# ---------------------------------------------------------------------------

class Support:
    """Maps between the constrained (model) scale and the sampling scale."""

    def to_unconstrained(self, x):
        raise NotImplementedError

    def to_constrained(self, z):
        raise NotImplementedError

    def log_jacobian(self, z):
        """log |dx/dz| evaluated at the unconstrained coordinate, elementwise."""
        raise NotImplementedError


class Real(Support):
    def to_unconstrained(self, x):
        return np.asarray(x, dtype=float).copy()

    def to_constrained(self, z):
        return np.asarray(z, dtype=float).copy()

    def log_jacobian(self, z):
        return np.zeros_like(np.asarray(z, dtype=float))


class Positive(Support):
    def to_unconstrained(self, x):
        return np.log(np.asarray(x, dtype=float))

    def to_constrained(self, z):
        return np.exp(np.asarray(z, dtype=float))

    def log_jacobian(self, z):
        return np.asarray(z, dtype=float).copy()


def _softplus(x):
    return np.logaddexp(0.0, x)


class UnitInterval(Support):
    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        return np.log(x) - np.log1p(-x)

    def to_constrained(self, z):
        from scipy.special import expit

        return expit(np.asarray(z, dtype=float))

    def log_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        return -_softplus(z) - _softplus(-z)


class Interval(Support):
    """Open interval with elementwise bounds; either side may be infinite."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if np.any(self.lower >= self.upper):
            raise ValueError("interval bounds must satisfy lower < upper")

    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = np.broadcast_arrays(self.lower, self.upper)
        lo = np.broadcast_to(lo, x.shape)
        hi = np.broadcast_to(hi, x.shape)
        z = np.empty_like(x)
        both = np.isfinite(lo) & np.isfinite(hi)
        lo_only = np.isfinite(lo) & ~np.isfinite(hi)
        hi_only = ~np.isfinite(lo) & np.isfinite(hi)
        neither = ~np.isfinite(lo) & ~np.isfinite(hi)
        if np.any(both):
            u = (x - lo) / (hi - lo)
            with np.errstate(divide="ignore"):
                z = np.where(both, np.log(u) - np.log1p(-u), z)
        if np.any(lo_only):
            with np.errstate(divide="ignore"):
                z = np.where(lo_only, np.log(x - lo), z)
        if np.any(hi_only):
            with np.errstate(divide="ignore"):
                z = np.where(hi_only, np.log(hi - x), z)
        z = np.where(neither, x, z)
        return z

    def to_constrained(self, z):
        from scipy.special import expit

        z = np.asarray(z, dtype=float)
        lo = np.broadcast_to(self.lower, z.shape)
        hi = np.broadcast_to(self.upper, z.shape)
        both = np.isfinite(lo) & np.isfinite(hi)
        lo_only = np.isfinite(lo) & ~np.isfinite(hi)
        hi_only = ~np.isfinite(lo) & np.isfinite(hi)
        neither = ~np.isfinite(lo) & ~np.isfinite(hi)
        x = np.where(both, lo + (hi - lo) * expit(z), 0.0)
        x = np.where(lo_only, lo + np.exp(z), x)
        x = np.where(hi_only, hi - np.exp(z), x)
        x = np.where(neither, z, x)
        return x

    def log_jacobian(self, z):
        z = np.asarray(z, dtype=float)
        lo = np.broadcast_to(self.lower, z.shape)
        hi = np.broadcast_to(self.upper, z.shape)
        both = np.isfinite(lo) & np.isfinite(hi)
        one_side = np.isfinite(lo) ^ np.isfinite(hi)
        neither = ~np.isfinite(lo) & ~np.isfinite(hi)
        with np.errstate(invalid="ignore"):
            width = np.where(both, hi - lo, 1.0)
        out = np.where(both, np.log(width) - _softplus(z) - _softplus(-z), 0.0)
        out = np.where(one_side, z, out)
        out = np.where(neither, 0.0, out)
        return out


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------

@dataclass
class Node:
    name: str
    shape: tuple
    support: Support


@dataclass
class Block:
    """One Metropolis update group.

    kind "joint": all named node components move together (multivariate
    proposal, adapted covariance, acceptance target 0.234 when dim > 1).
    kind "componentwise": a single vector node whose components have
    conditionally independent posteriors; each component proposes and
    accepts independently at the scalar target 0.44. `logdensity` must then
    return one value per component.

    `init_scale` seeds the proposal before adaptation: a scalar or (d,) array
    of standard deviations, or a (d, d) covariance Cholesky factor (joint
    blocks), all on the unconstrained scale.
    """

    names: tuple
    kind: str = "joint"
    logdensity: object = None  # optional local density; falls back to model's
    init_scale: object = None


@dataclass
class Refresher:
    """Latent quantity refreshed by a direct draw at the start of each sweep."""

    name: str
    draw: object  # fn(state, rng) -> array


@dataclass
class ModelGraph:
    nodes: list
    logdensity: object  # fn(state) -> float
    blocks: list
    draw_initial: object  # fn(rng) -> state dict
    refreshers: list = field(default_factory=list)
    propriety_checks: list = field(default_factory=list)
    name: str = "model"

    def __post_init__(self):
        by_name = {n.name: n for n in self.nodes}
        if len(by_name) != len(self.nodes):
            raise ValueError("duplicate node names")
        refresh_names = {r.name for r in self.refreshers}
        blocked = [nm for b in self.blocks for nm in b.names]
        if len(blocked) != len(set(blocked)):
            raise ValueError("a parameter appears in more than one block")
        free = set(by_name) - refresh_names
        if set(blocked) != free:
            missing = free - set(blocked)
            extra = set(blocked) - free
            raise ValueError(f"blocks must partition free parameters (missing={missing}, extra={extra})")
        for b in self.blocks:
            if b.kind not in ("joint", "componentwise"):
                raise ValueError(f"unknown block kind {b.kind!r}")
            if b.kind == "componentwise" and len(b.names) != 1:
                raise ValueError("componentwise blocks hold exactly one vector node")
        self._by_name = by_name

    def node(self, name):
        return self._by_name[name]


@dataclass
class ChainConfig:
    seed: int
    n_chains: int = 4
    n_iter: int = 4000
    n_burnin: int = 2000
    adapt_window: int = 50

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not (0 <= self.n_burnin < self.n_iter):
            raise ValueError("need 0 <= n_burnin < n_iter")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be >= 1")


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def rhat(draws) -> float:
    """Split-chain potential scale reduction over an array (chains, iterations)."""
    d = np.asarray(draws, dtype=float)
    if d.ndim != 2 or d.shape[0] < 2 or d.shape[1] < 4:
        raise InsufficientDraws("rhat needs >= 2 chains with >= 4 draws each")
    half = d.shape[1] // 2
    split = np.concatenate([d[:, :half], d[:, half: 2 * half]], axis=0)
    n = split.shape[1]
    means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    if within == 0.0:
        return 1.0 if between == 0.0 else np.inf
    var_hat = (n - 1) / n * within + between / n
    return float(np.sqrt(var_hat / within))


def _autocovariance(x):
    """Biased autocovariance of a 1-D series for lags 0..n-1, via FFT."""
    n = x.size
    xd = x - x.mean()
    m = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xd, m)
    acov = np.fft.irfft(f * np.conjugate(f), m)[:n].real
    return acov / n


def ess(draws) -> float:
    """Effective sample size (autocorrelation-based, Geyer initial monotone).

    Accepts (iterations,) or (chains, iterations). A zero-variance input is
    reported as 0.0 (degenerate chain).
    """
    d = np.asarray(draws, dtype=float)
    if d.ndim == 1:
        d = d[None, :]
    if d.ndim != 2 or d.shape[1] < 4:
        raise InsufficientDraws("ess needs >= 4 draws")
    c, n = d.shape
    if np.allclose(d.var(), 0.0):
        return 0.0
    acov = np.stack([_autocovariance(d[i]) for i in range(c)])
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    mean_acov = acov.mean(axis=0)
    if c > 1:
        between = n * d.mean(axis=1).var(ddof=1)
        var_plus = (n - 1) / n * w + between / n
    else:
        var_plus = (n - 1) / n * w + acov[:, 0].mean() / n
    if var_plus <= 0:
        return 0.0
    rho = 1.0 - (w - mean_acov) / var_plus

    # Geyer: accumulate while consecutive-pair sums stay positive, then
    # enforce monotone nonincreasing pair sums.
    tau = -rho[0]
    prev_pair = np.inf
    t = 0
    max_t = n - 2 if n % 2 == 0 else n - 1
    while t < max_t:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev_pair)
        tau += 2.0 * pair
        prev_pair = pair
        t += 2
    tau = max(tau, 1.0 / np.log10(n + 10))  # guard against anti-correlation collapse
    return float(c * n / tau)


# ---------------------------------------------------------------------------
# posterior store
# ---------------------------------------------------------------------------

@dataclass
class PosteriorStore:
    """Post-burn-in draws for every node, with diagnostics and a manifest."""

    draws: dict
    diagnostics: dict
    manifest: dict

    @property
    def n_chains(self):
        return next(iter(self.draws.values())).shape[0]

    @property
    def n_kept(self):
        return next(iter(self.draws.values())).shape[1]

    def pooled(self, name):
        """Draws for a node pooled across chains: (chains*kept, *shape)."""
        a = self.draws[name]
        return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])

    def component_names(self):
        out = []
        for name, a in self.draws.items():
            if a.ndim == 2:
                out.append(name)
            else:
                for idx in range(int(np.prod(a.shape[2:]))):
                    out.append(f"{name}[{idx}]")
        return out

    def component(self, comp_name):
        if "[" in comp_name:
            name, idx = comp_name[:-1].split("[")
            a = self.draws[name]
            flat = a.reshape(a.shape[0], a.shape[1], -1)
            return flat[:, :, int(idx)]
        return self.draws[comp_name]

    def summary(self, name):
        pooled = self.pooled(name).reshape(self.n_chains * self.n_kept, -1)
        return {
            "mean": pooled.mean(axis=0),
            "lo": np.percentile(pooled, 2.5, axis=0),
            "hi": np.percentile(pooled, 97.5, axis=0),
        }

    def interval(self, comp_name, level=0.95):
        x = self.component(comp_name).ravel()
        a = 100 * (1 - level) / 2
        return float(np.percentile(x, a)), float(np.percentile(x, 100 - a))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nodes_meta = {}
        for name, a in self.draws.items():
            fname = f"{name}.f64"
            a.astype("<f8").tofile(directory / fname)
            nodes_meta[name] = {
                "file": fname,
                "chains": int(a.shape[0]),
                "iterations": int(a.shape[1]),
                "shape": [int(s) for s in a.shape[2:]],
                "dtype": "<f8",
                "layout": "C order over (chain, iteration, component); iteration-major within a chain",
            }
        payload = {
            "manifest": self.manifest,
            "nodes": nodes_meta,
            "diagnostics": self.diagnostics,
        }
        (directory / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        payload = json.loads((directory / "manifest.json").read_text())
        draws = {}
        for name, meta in payload["nodes"].items():
            a = np.fromfile(directory / meta["file"], dtype="<f8")
            draws[name] = a.reshape(meta["chains"], meta["iterations"], *meta["shape"])
        return cls(draws=draws, diagnostics=payload["diagnostics"], manifest=payload["manifest"])


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------

class _BlockState:
    """Per-chain adaptive state for one block."""

    def __init__(self, block, model):
        self.block = block
        self.nodes = [model.node(nm) for nm in block.names]
        self.sizes = [int(np.prod(n.shape)) if n.shape else 1 for n in self.nodes]
        self.dim = sum(self.sizes)
        scale = block.init_scale
        if block.kind == "componentwise":
            if scale is None:
                self.log_step = np.full(self.dim, np.log(0.5))
            else:
                self.log_step = np.log(2.4 * np.broadcast_to(np.asarray(scale, dtype=float), (self.dim,))).copy()
            self.target = TARGET_SCALAR
        else:
            self.target = TARGET_JOINT if self.dim > 1 else TARGET_SCALAR
            # log_step carries the 2.38/sqrt(d)-style multiplier; chol carries
            # the target shape (identity until adapted or seeded)
            self.log_step = np.log(2.38 / np.sqrt(self.dim)) if self.dim > 1 else np.log(0.5)
            self.chol = np.eye(self.dim)
            if scale is not None:
                arr = np.asarray(scale, dtype=float)
                if self.dim == 1:
                    self.log_step = float(np.log(2.4 * float(arr)))
                elif arr.ndim == 2:
                    self.chol = arr.copy()
                else:
                    self.chol = np.diag(np.broadcast_to(arr, (self.dim,)))
            self.mean = np.zeros(self.dim)
            self.m2 = np.zeros((self.dim, self.dim))
            self.count = 0
        self.rm_t = 0

    def pack(self, state):
        parts = []
        for node in self.nodes:
            z = node.support.to_unconstrained(state[node.name])
            parts.append(np.atleast_1d(z).ravel())
        return np.concatenate(parts) if len(parts) > 1 else parts[0]

    def unpack(self, z, state):
        """Write constrained values for packed vector z into state (in place)."""
        off = 0
        for node, size in zip(self.nodes, self.sizes):
            seg = z[off: off + size]
            x = node.support.to_constrained(seg.reshape(node.shape) if node.shape else seg[0])
            state[node.name] = np.asarray(x, dtype=float).reshape(node.shape)
            off += size

    def log_jac(self, z):
        out = 0.0
        off = 0
        for node, size in zip(self.nodes, self.sizes):
            seg = z[off: off + size]
            out += float(np.sum(node.support.log_jacobian(seg)))
            off += size
        return out

    def log_jac_components(self, z):
        # componentwise blocks hold exactly one node
        return self.nodes[0].support.log_jacobian(z)

    def update_covariance(self, z):
        self.count += 1
        delta = z - self.mean
        self.mean += delta / self.count
        self.m2 += np.outer(delta, z - self.mean)

    def reset_covariance(self):
        # discard the pre-convergence transient so the frozen proposal
        # reflects the stationary shape
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros((self.dim, self.dim))
        self.count = 0

    def refresh_chol(self):
        if self.count < max(3 * self.dim, 20):
            return
        cov = self.m2 / (self.count - 1)
        # a runaway covariance (e.g. a chain drifting on a likelihood plateau)
        # must not beget ever-larger proposals
        top = float(np.max(np.diag(cov)))
        if top > 1e4:
            cov = cov * (1e4 / top)
        jitter = 1e-10 * max(np.trace(cov) / self.dim, 1e-12)
        try:
            self.chol = np.linalg.cholesky(cov + jitter * np.eye(self.dim))
        except np.linalg.LinAlgError:
            pass

    def adapt_step(self, alpha):
        self.rm_t += 1
        gamma = self.rm_t ** -0.6
        self.log_step = float(np.clip(self.log_step + gamma * (alpha - self.target), -12.0, 3.0))


def _eval(fn, state, context, proposal=False):
    """Evaluate a log density. NaN at a proposal means reject (-inf); NaN at the
    current state is a model defect and aborts the chain with a state dump."""
    v = np.asarray(fn(state), dtype=float)
    if np.any(np.isnan(v)):
        if proposal:
            return np.where(np.isnan(v), -np.inf, v)
        raise NonFiniteLogdensity(
            f"NaN log density in {context}", state={k: np.array(s) for k, s in state.items()}
        )
    return v


def run_chains(model: ModelGraph, config: ChainConfig, extra_manifest: dict | None = None) -> PosteriorStore:
    """Run adaptive Metropolis-within-Gibbs chains and assemble a PosteriorStore."""
    for check in model.propriety_checks:
        ok, witness = check()
        if not ok:
            raise ImproperPosterior(f"flat-prior propriety condition failed: {witness}", witness=witness)

    kept = config.n_iter - config.n_burnin
    n_blocks = len(model.blocks)
    all_names = [n.name for n in model.nodes]
    out = {
        n.name: np.empty((config.n_chains, kept) + tuple(n.shape), dtype=float)
        for n in model.nodes
    }
    accept_counts = {i: 0 for i in range(n_blocks)}
    accept_total = {i: 0 for i in range(n_blocks)}

    for chain in range(config.n_chains):
        state = None
        for attempt in range(100):
            rng = substream(config.seed, chain, _INIT_EPOCH + attempt, 0)
            candidate = model.draw_initial(rng)
            candidate = {k: np.asarray(v, dtype=float).reshape(model.node(k).shape) for k, v in candidate.items()}
            ld = _eval(model.logdensity, candidate, "initialization")
            if np.isfinite(ld):
                state = candidate
                break
        if state is None:
            raise InitializationFailed(
                f"no finite-density initial state for chain {chain} after 100 prior draws"
            )

        blocks = [_BlockState(b, model) for b in model.blocks]

        for it in range(config.n_iter):
            adapting = it < config.n_burnin
            for r_idx, refresher in enumerate(model.refreshers):
                rng = substream(config.seed, chain, it, n_blocks + r_idx)
                val = refresher.draw(state, rng)
                state[refresher.name] = np.asarray(val, dtype=float).reshape(model.node(refresher.name).shape)

            for b_idx, bs in enumerate(blocks):
                rng = substream(config.seed, chain, it, b_idx)
                local = bs.block.logdensity or model.logdensity
                z = bs.pack(state)
                if bs.block.kind == "componentwise":
                    cur = _eval(local, state, f"block {bs.block.names}")
                    cur_jac = bs.log_jac_components(z)
                    z_prop = z + np.exp(bs.log_step) * rng.standard_normal(bs.dim)
                    bs.unpack(z_prop, state)
                    prop = _eval(local, state, f"block {bs.block.names}", proposal=True)
                    prop_jac = bs.log_jac_components(z_prop)
                    with np.errstate(invalid="ignore"):
                        delta = (prop + prop_jac) - (cur + cur_jac)
                    delta = np.where(np.isnan(delta), -np.inf, delta)
                    acc = np.log(rng.uniform(size=bs.dim)) < delta
                    if not np.all(acc):
                        bs.unpack(np.where(acc, z_prop, z), state)
                    alpha = np.exp(np.clip(delta, None, 0.0))
                    if adapting:
                        bs.rm_t += 1
                        gamma = bs.rm_t ** -0.6
                        bs.log_step += gamma * (alpha - bs.target)
                        np.clip(bs.log_step, -12.0, 3.0, out=bs.log_step)
                    else:
                        accept_counts[b_idx] += int(acc.sum())
                        accept_total[b_idx] += bs.dim
                else:
                    cur = float(_eval(local, state, f"block {bs.block.names}"))
                    cur_jac = bs.log_jac(z)
                    eps = rng.standard_normal(bs.dim)
                    if bs.dim > 1:
                        stepv = np.exp(float(bs.log_step)) * (bs.chol @ eps)
                    else:
                        stepv = np.exp(float(bs.log_step)) * eps
                    z_prop = z + stepv
                    saved = {n.name: state[n.name] for n in bs.nodes}
                    bs.unpack(z_prop, state)
                    prop = float(_eval(local, state, f"block {bs.block.names}", proposal=True))
                    prop_jac = bs.log_jac(z_prop)
                    delta = (prop + prop_jac) - (cur + cur_jac)
                    if np.isnan(delta):
                        delta = -np.inf
                    accepted = np.log(rng.uniform()) < delta
                    if not accepted:
                        for k, v in saved.items():
                            state[k] = v
                    alpha = float(np.exp(min(delta, 0.0)))
                    if adapting:
                        bs.adapt_step(alpha)
                        if bs.dim > 1:
                            if it + 1 == config.n_burnin // 2:
                                bs.reset_covariance()
                            bs.update_covariance(bs.pack(state))
                            if (it + 1) % config.adapt_window == 0:
                                bs.refresh_chol()
                    else:
                        accept_counts[b_idx] += int(accepted)
                        accept_total[b_idx] += 1

            if it >= config.n_burnin:
                r = it - config.n_burnin
                for name in all_names:
                    out[name][chain, r] = state[name]

    diagnostics = {}
    store = PosteriorStore(draws=out, diagnostics=diagnostics, manifest={})
    for comp in store.component_names():
        series = store.component(comp)
        degenerate = bool(np.allclose(series.var(), 0.0))
        entry = {"ess": 0.0 if degenerate else ess(series), "degenerate": degenerate}
        if config.n_chains >= 2 and kept >= 4:
            entry["rhat"] = 1.0 if degenerate else rhat(series)
        else:
            entry["rhat"] = None
        diagnostics[comp] = entry

    manifest = {
        "model": model.name,
        "seed": int(config.seed),
        "n_chains": config.n_chains,
        "n_iter": config.n_iter,
        "n_burnin": config.n_burnin,
        "adapt_window": config.adapt_window,
        "acceptance": {
            str(model.blocks[i].names): (accept_counts[i] / accept_total[i] if accept_total[i] else None)
            for i in range(n_blocks)
        },
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    store.manifest = manifest
    return store
