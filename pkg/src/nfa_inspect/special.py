"""Regularized incomplete gamma / beta functions evaluated in log space.

Everything the NFA statistics need reduces to two tails:

* ``Q(a, x)``, the upper regularized incomplete gamma function, which gives
  the chi-square survival function ``sf(x; df) = Q(df / 2, x / 2)``;
* ``I_x(a, b)``, the regularized incomplete beta function, which gives the
  binomial upper tail ``P(X >= k) = I_p(k, n - k + 1)`` and extends it to
  real-valued ``n`` and ``k``.

Both are computed with the classic pair of expansions: a power series where
it converges fast and a continued fraction (modified Lentz) elsewhere.  The
switch-over points are

* gamma: series for ``x < a + 1``, continued fraction otherwise;
* beta: direct continued fraction for ``x < (a + 1) / (a + b + 2)``,
  reflected ``1 - I_{1-x}(b, a)`` otherwise.

The log of the prefactor (``x^a e^-x / Gamma(a)`` and its beta analogue) is
kept separately, so tails far below the double-precision underflow limit
are still returned accurately as logarithms.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

__all__ = [
    "log_gammainc_pair",
    "log_gammainc_pair_scalar",
    "log_betainc_pair",
    "chi2_cdf",
    "chi2_sf",
    "chi2_logsf",
    "chi2_logsf_scalar",
    "chi2_quantile",
    "binomial_tail",
    "log_binomial_tail",
]

_EPS = 1e-16
_FPMIN = 1e-300
_MAX_ITER = 100_000


def _log1mexp(log_p):
    """log(1 - exp(log_p)) for log_p <= 0, stable on both ends."""
    log_p = np.asarray(log_p, dtype=np.float64)
    out = np.empty_like(log_p)
    near = log_p > -math.log(2.0)
    out[near] = np.log(-np.expm1(log_p[near]))
    out[~near] = np.log1p(-np.exp(log_p[~near]))
    return out


def _log1mexp_scalar(log_p: float) -> float:
    if log_p == 0.0:
        return -math.inf
    if log_p > -math.log(2.0):
        return math.log(-math.expm1(log_p))
    return math.log1p(-math.exp(log_p))


# ---------------------------------------------------------------------------
# Incomplete gamma
# ---------------------------------------------------------------------------
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# above this shape the prefactor is rebuilt from Stirling's series, which
# avoids cancelling a*log(x), x and lgamma(a) against each other near x ~ a
_STIRLING_MIN_A = 10.0
_LOG1PMX_TERMS = 24


def _log1pmx(t):
    """log(1 + t) - t for |t| < 1/2, vectorized."""
    u = t / (2.0 + t)
    u2 = u * u
    # log1p(t) = 2 atanh(u); the first-order terms cancel exactly
    acc = np.zeros_like(u)
    for k in range(_LOG1PMX_TERMS, 0, -1):
        acc = acc * u2 + 1.0 / (2 * k + 1)
    return -2.0 * u2 / (1.0 - u) + 2.0 * u * u2 * acc


def _log1pmx_scalar(t: float) -> float:
    u = t / (2.0 + t)
    u2 = u * u
    acc = 0.0
    for k in range(_LOG1PMX_TERMS, 0, -1):
        acc = acc * u2 + 1.0 / (2 * k + 1)
    return -2.0 * u2 / (1.0 - u) + 2.0 * u * u2 * acc


def _stirling_tail(a):
    """lgamma(a) - [(a - 1/2) log a - a + log(2 pi)/2] for a >= 10."""
    r = 1.0 / a
    r2 = r * r
    return r * (1 / 12 - r2 * (1 / 360 - r2 * (1 / 1260 - r2 * (1 / 1680 - r2 / 1188))))


def _log_gamma_prefactor(a, x):
    """log(x^a e^-x / Gamma(a)), vectorized over matching arrays."""
    out = a * np.log(x) - x - gammaln(a)
    big = (a >= _STIRLING_MIN_A) & (np.abs(x - a) < 0.5 * a)
    if big.any():
        ab, xb = a[big], x[big]
        out[big] = (ab * _log1pmx((xb - ab) / ab) + 0.5 * np.log(ab) - _HALF_LOG_2PI
                    - _stirling_tail(ab))
    return out


def _log_gamma_prefactor_scalar(a: float, x: float) -> float:
    if a < _STIRLING_MIN_A or abs(x - a) >= 0.5 * a:
        return a * math.log(x) - x - math.lgamma(a)
    return (a * _log1pmx_scalar((x - a) / a) + 0.5 * math.log(a) - _HALF_LOG_2PI
            - _stirling_tail(a))


# active sets are compacted every _BATCH iterations; extra iterations after
# convergence only add terms below eps and leave results unchanged
_BATCH = 8


def _gamma_series_sum(a, x):
    """sum_{n>=0} x^n / ((a+1)...(a+n)), vectorized."""
    out = np.empty_like(x)
    idx = np.arange(x.size)
    ap, xx = a.copy(), x.copy()
    term = np.ones_like(x)
    total = np.ones_like(x)
    for _ in range(0, _MAX_ITER, _BATCH):
        for _ in range(_BATCH):
            ap += 1.0
            term *= xx / ap
            total += term
        done = np.abs(term) < np.abs(total) * _EPS
        if done.any():
            out[idx[done]] = total[done]
            keep = ~done
            idx, ap, xx, term, total = idx[keep], ap[keep], xx[keep], term[keep], total[keep]
            if idx.size == 0:
                return out
    raise ArithmeticError("incomplete gamma series did not converge")


def _gamma_cf(a, x):
    """Continued fraction for Gamma(a) Q(a, x) e^x x^-a (modified Lentz), vectorized."""
    out = np.empty_like(x)
    idx = np.arange(x.size)
    aa = a.copy()
    b = x + 1.0 - a
    c = np.full_like(x, 1.0 / _FPMIN)
    d = 1.0 / b
    h = d.copy()
    converged = np.zeros(x.size, dtype=bool)
    i = 0
    while i < _MAX_ITER:
        for _ in range(_BATCH):
            i += 1
            an = -i * (i - aa)
            b += 2.0
            d = an * d + b
            d[np.abs(d) < _FPMIN] = _FPMIN
            c = b + an / c
            c[np.abs(c) < _FPMIN] = _FPMIN
            d = 1.0 / d
            delta = d * c
            # freeze entries once converged so later factors cannot drift them
            h = np.where(converged, h, h * delta)
            converged |= np.abs(delta - 1.0) < _EPS
        if converged.any():
            out[idx[converged]] = h[converged]
            keep = ~converged
            idx, aa, b, c, d, h = idx[keep], aa[keep], b[keep], c[keep], d[keep], h[keep]
            converged = converged[keep]
            if idx.size == 0:
                return out
    raise ArithmeticError("incomplete gamma continued fraction did not converge")


def log_gammainc_pair(a, x):
    """Return ``(log P(a, x), log Q(a, x))`` elementwise.

    ``a > 0`` and ``x >= 0`` broadcast against each other.  ``x = inf`` is
    accepted and gives ``(0, -inf)``.
    """
    a, x = np.broadcast_arrays(np.asarray(a, dtype=np.float64),
                               np.asarray(x, dtype=np.float64))
    shape = a.shape
    a = a.ravel().copy()
    x = x.ravel().copy()
    if np.any(a <= 0) or np.any(np.isnan(a)):
        raise ValueError("shape parameter a must be > 0")
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("x must be >= 0")

    log_p = np.empty_like(x)
    log_q = np.empty_like(x)

    zero = x == 0.0
    inf = np.isinf(x)
    log_p[zero], log_q[zero] = -np.inf, 0.0
    log_p[inf], log_q[inf] = 0.0, -np.inf

    rest = ~(zero | inf)
    series = rest & (x < a + 1.0)
    cf = rest & ~series

    if series.any():
        aa, xx = a[series], x[series]
        s = _gamma_series_sum(aa, xx)
        lp = _log_gamma_prefactor(aa, xx) - np.log(aa) + np.log(s)
        lp = np.minimum(lp, 0.0)
        log_p[series] = lp
        log_q[series] = _log1mexp(lp)
    if cf.any():
        aa, xx = a[cf], x[cf]
        h = _gamma_cf(aa, xx)
        lq = _log_gamma_prefactor(aa, xx) + np.log(h)
        lq = np.minimum(lq, 0.0)
        log_q[cf] = lq
        log_p[cf] = _log1mexp(lq)
    return log_p.reshape(shape), log_q.reshape(shape)


def log_gammainc_pair_scalar(a: float, x: float) -> tuple[float, float]:
    """Scalar twin of :func:`log_gammainc_pair` (no numpy call overhead).

    Used in tight loops such as region growing, where one tail is evaluated
    per candidate pixel.
    """
    if a <= 0:
        raise ValueError("shape parameter a must be > 0")
    if x < 0:
        raise ValueError("x must be >= 0")
    if x == 0.0:
        return -math.inf, 0.0
    if math.isinf(x):
        return 0.0, -math.inf
    if x < a + 1.0:
        ap, term, total = a, 1.0, 1.0
        for _ in range(_MAX_ITER):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        else:
            raise ArithmeticError("incomplete gamma series did not converge")
        lp = min(_log_gamma_prefactor_scalar(a, x) - math.log(a) + math.log(total), 0.0)
        return lp, _log1mexp_scalar(lp)
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma continued fraction did not converge")
    lq = min(_log_gamma_prefactor_scalar(a, x) + math.log(h), 0.0)
    return _log1mexp_scalar(lq), lq


# ---------------------------------------------------------------------------
# Incomplete beta
# ---------------------------------------------------------------------------
def _betacf(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def log_betainc_pair(a: float, b: float, x: float) -> tuple[float, float]:
    """Return ``(log I_x(a, b), log(1 - I_x(a, b)))`` for scalars."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return -math.inf, 0.0
    if x == 1.0:
        return 0.0, -math.inf
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        li = min(log_front + math.log(_betacf(a, b, x)) - math.log(a), 0.0)
        return li, _log1mexp_scalar(li)
    lc = min(log_front + math.log(_betacf(b, a, 1.0 - x)) - math.log(b), 0.0)
    return _log1mexp_scalar(lc), lc


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------
def _check_chi2_args(x, df):
    if np.any(np.asarray(df) <= 0):
        raise ValueError("df must be > 0")
    if np.any(np.asarray(x) < 0):
        raise ValueError("x must be >= 0")


def chi2_cdf(x, df):
    """Chi-square CDF, ``P(df / 2, x / 2)``; accepts non-integer ``df``."""
    _check_chi2_args(x, df)
    log_p, _ = log_gammainc_pair(np.asarray(df) / 2.0, np.asarray(x) / 2.0)
    out = np.exp(log_p)
    return float(out) if out.ndim == 0 else out


def chi2_sf(x, df):
    """Chi-square survival function ``1 - cdf``."""
    return np.exp(chi2_logsf(x, df))


def chi2_logsf(x, df):
    """Natural log of the chi-square survival function."""
    _check_chi2_args(x, df)
    _, log_q = log_gammainc_pair(np.asarray(df) / 2.0, np.asarray(x) / 2.0)
    return float(log_q) if log_q.ndim == 0 else log_q


def chi2_logsf_scalar(x: float, df: float) -> float:
    if df <= 0:
        raise ValueError("df must be > 0")
    if x < 0:
        raise ValueError("x must be >= 0")
    return log_gammainc_pair_scalar(0.5 * df, 0.5 * x)[1]


def chi2_quantile(p: float, df: float) -> float:
    """x such that ``chi2_cdf(x, df) == p``, by bracketed root finding.

    For ``p > 0.5`` the root is sought on the log survival function, which
    keeps resolution when ``1 - p`` is tiny.
    """
    from scipy.optimize import brentq

    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in the open interval (0, 1)")
    if df <= 0:
        raise ValueError("df must be > 0")
    if p <= 0.5:
        target = math.log(p)

        def f(x):
            return log_gammainc_pair_scalar(0.5 * df, 0.5 * x)[0] - target
    else:
        target = math.log1p(-p)

        def f(x):
            return target - log_gammainc_pair_scalar(0.5 * df, 0.5 * x)[1]

    hi = max(2.0 * df, 1.0)
    while f(hi) < 0:
        hi *= 2.0
    lo = 0.0
    if p <= 0.5:
        # log P(0) = -inf; start from a tiny positive bracket instead
        lo = min(hi, 1e-300)
        while f(lo) > 0:
            lo *= 1e-3
            if lo == 0.0:
                return 0.0
    return brentq(f, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=500)


def log_binomial_tail(n: float, k: float, p: float) -> float:
    """Natural log of ``P(X >= k)``, X ~ Binomial(n, p), real ``n`` and ``k``."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if n < 0:
        raise ValueError("n must be >= 0")
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    if k <= 0:
        return 0.0
    return log_betainc_pair(k, n - k + 1.0, p)[0]


def binomial_tail(n: float, k: float, p: float) -> float:
    """``P(X >= k)`` for X ~ Binomial(n, p), via ``I_p(k, n - k + 1)``."""
    return math.exp(log_binomial_tail(n, k, p))
