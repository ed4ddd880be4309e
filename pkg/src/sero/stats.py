"""Shared numerical helpers: stable transforms, discrete log-pmfs, truncated normals."""

import numpy as np
from scipy.special import expit, gammaln, log_ndtr, ndtr, ndtri_exp, xlogy


def sigmoid(x):
    return expit(x)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def round_half_even(x):
    """Banker's rounding to the nearest integer, returned as int scalar/array."""
    r = np.rint(np.asarray(x, dtype=float))
    if np.ndim(x) == 0:
        return int(r)
    return r.astype(np.int64)


def binom_logpmf(k, n, p):
    """log Binomial(k | n, p), vectorized; exact at p in {0, 1}."""
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    coef = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.log(p)
        l1mp = np.log1p(-p)
        term_k = np.where(k > 0, k * lp, 0.0)
        term_nk = np.where(n - k > 0, (n - k) * l1mp, 0.0)
    res = coef + term_k + term_nk
    bad = (k < 0) | (k > n) | (k != np.floor(k))
    return np.where(bad, -np.inf, res)


def poisson_logpmf(k, lam):
    """log Poisson(k | lam), vectorized; lam=0 is a point mass at 0."""
    k = np.asarray(k, dtype=float)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        core = xlogy(k, lam) - lam - gammaln(k + 1)
    zero = lam == 0
    if np.any(zero):
        core = np.where(zero, np.where(k == 0, 0.0, -np.inf), core)
    bad = (k < 0) | (k != np.floor(k))
    return np.where(bad, -np.inf, core)


def beta_logpdf(x, a, b):
    x = np.asarray(x, dtype=float)
    lognorm = gammaln(a + b) - gammaln(a) - gammaln(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return lognorm + xlogy(a - 1.0, x) + xlogy(b - 1.0, 1.0 - x)


def normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * np.log(2.0 * np.pi)


def log_normal_mass(lo, hi):
    """log(Phi(hi) - Phi(lo)) for standardized bounds, stable in both tails.

    Bounds may be +-inf; requires lo <= hi elementwise (equal bounds give -inf).
    """
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    out = np.full(lo.shape, -np.inf)

    # both bounds in the left tail: difference of log CDFs
    left = hi <= 0.0
    # both in the right tail: reflect to the left tail
    right = lo >= 0.0
    mid = ~(left | right)

    with np.errstate(divide="ignore", invalid="ignore"):
        if np.any(left):
            la = log_ndtr(np.where(left, lo, -1.0))
            lb = log_ndtr(np.where(left, hi, 0.0))
            d = np.clip(la - lb, None, 0.0)
            val = lb + np.log1p(-np.exp(d))
            out = np.where(left & (la < lb), val, out)
        if np.any(right):
            la = log_ndtr(np.where(right, -hi, -1.0))
            lb = log_ndtr(np.where(right, -lo, 0.0))
            d = np.clip(la - lb, None, 0.0)
            val = lb + np.log1p(-np.exp(d))
            out = np.where(right & (la < lb), val, out)
        if np.any(mid):
            m = ndtr(hi) - ndtr(lo)
            val = np.log(np.where(m > 0, m, 1.0))
            out = np.where(mid & (m > 0), val, out)
    if out.ndim == 0:
        return float(out)
    return out


def truncnorm_logpdf(x, mean, sd, lower, upper):
    """Log density of a normal(mean, sd^2) truncated to (lower, upper).

    Returns -inf outside the open interval. All arguments broadcast.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    logmass = log_normal_mass(a, b)
    core = normal_logpdf(x, mean, sd) - logmass
    inside = (x > lower) & (x < upper)
    res = np.where(inside, core, -np.inf)
    if res.ndim == 0:
        return float(res)
    return res


def _tail_truncnorm_standard(a, b, u):
    """Standardized truncated-normal inverse CDF, stable when the interval sits
    deep in the left tail. Requires a < b elementwise."""
    la = log_ndtr(a)
    lb = log_ndtr(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = lb + np.log1p(-np.clip(1.0 - u, 0.0, 1.0) * -np.expm1(la - lb))
    return ndtri_exp(np.minimum(logq, 0.0))


def truncnorm_rvs(mean, sd, lower, upper, rng, size=None):
    """Draw from normal(mean, sd^2) truncated to (lower, upper) by inverse CDF.

    Works in log-CDF space on the nearer tail, so intervals far from the mean
    still sample correctly.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    if size is None:
        size = np.broadcast(mean, sd, a, b).shape
    u = rng.uniform(size=size)
    a_b, b_b, u_b = np.broadcast_arrays(np.broadcast_to(a, size), np.broadcast_to(b, size), u)
    # reflect right-tail intervals into the left tail
    flip = a_b + b_b > 0.0
    a_eff = np.where(flip, -b_b, a_b)
    b_eff = np.where(flip, -a_b, b_b)
    u_eff = np.where(flip, 1.0 - u_b, u_b)
    z = _tail_truncnorm_standard(a_eff, b_eff, u_eff)
    z = np.where(flip, -z, z)
    x = mean + sd * z
    lo_open = np.nextafter(lower, upper)
    hi_open = np.nextafter(upper, lower)
    x = np.clip(x, lo_open, hi_open)
    if np.ndim(x) == 0:
        return float(x)
    return x
