"""
Log-scaled modified Bessel functions of the first kind.

Only what the von Mises-Fisher routines need is provided: ``log I_nu(x)``
(and its exponentially scaled form ``log I_nu(x) - x``) and the ratio
``I_{nu+1}(x) / I_nu(x)`` together with its complement ``1 - ratio``.

Regimes (``x_asym = 50 + 4 nu``):

* ``x <= x_asym``: ascending power series summed in log space for
  ``log I``; Gauss continued fraction (modified Lentz) for the ratio.
* ``x > x_asym`` and ``nu < 12``: Hankel large-argument expansion.
* ``x > x_asym`` and ``nu >= 12``: Debye uniform expansion, terms generated
  exactly from the polynomial recurrence.

In the asymptotic regimes the ratio is formed from differences of scaled
logarithms so that ``1 - ratio`` keeps full relative precision for
arguments up to 1e6 and beyond.
"""

from fractions import Fraction

import numpy as np
from scipy.special import gammaln

_DEBYE_NU_MIN = 12.0
_N_DEBYE = 12
_CF_MAX_ITER = 20000
_TINY = 1e-300


def _asym_threshold(nu):
    return 50.0 + 4.0 * nu


def _debye_polynomials(n_terms):
    # U_{k+1}(p) = p^2 (1 - p^2) U_k'(p) / 2 + (1/8) int_0^p (1 - 5 t^2) U_k(t) dt
    polys = [[Fraction(1)]]
    for _ in range(n_terms - 1):
        u = polys[-1]
        deriv = [k * c for k, c in enumerate(u)][1:]
        # p^2 (1 - p^2) u'(p) / 2
        first = [Fraction(0)] * (len(deriv) + 4)
        for k, c in enumerate(deriv):
            first[k + 2] += c / 2
            first[k + 4] -= c / 2
        # (1 - 5 t^2) u(t), then integrate
        prod = [Fraction(0)] * (len(u) + 2)
        for k, c in enumerate(u):
            prod[k] += c
            prod[k + 2] -= 5 * c
        integ = [Fraction(0)] + [c / (k + 1) / 8 for k, c in enumerate(prod)]
        size = max(len(first), len(integ))
        new = [Fraction(0)] * size
        for k, c in enumerate(first):
            new[k] += c
        for k, c in enumerate(integ):
            new[k] += c
        while len(new) > 1 and new[-1] == 0:
            new.pop()
        polys.append(new)
    return [np.array([float(c) for c in p]) for p in polys]


_DEBYE_U = _debye_polynomials(_N_DEBYE)


def _log_series_sum(mu, x):
    """log of sum_k (x^2/4)^k / (k! (mu+1)_k) for x > 0 (vector)."""
    x = np.asarray(x, dtype=float)
    logq = 2.0 * (np.log(x) - np.log(2.0))  # no underflow for subnormal x
    # peak index of the (unimodal) term sequence, plus a generous tail
    kpk = 0.5 * (np.sqrt(x * x + mu * mu) - mu)
    kmax = int(np.max(kpk + 12.0 * np.sqrt(kpk + 1.0) + 40.0))
    j = np.arange(kmax, dtype=float)
    log_ratio = logq[:, None] - np.log(j + 1.0)[None, :] - np.log(mu + j + 1.0)[None, :]
    terms = np.concatenate([np.zeros((x.size, 1)), np.cumsum(log_ratio, axis=1)], axis=1)
    m = np.maximum(terms.max(axis=1, keepdims=True), 0.0)
    return (m + np.log(np.exp(terms - m).sum(axis=1, keepdims=True)))[:, 0]


def series_regime(nu, x):
    """Boolean mask of arguments handled by the ascending series."""
    x = np.asarray(x, dtype=float)
    return (x > 0.0) & (x <= _asym_threshold(float(nu)))


def log_series_factor(nu, x):
    """``log S_nu(x)`` where ``I_nu(x) = (x/2)^nu S_nu(x) / Gamma(nu + 1)``.

    ``S_nu(0) = 1``; small and free of cancellation for small ``x``.
    """
    nu = float(nu)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.zeros_like(x)
    small = series_regime(nu, x)
    if small.any():
        out[small] = _log_series_sum(nu, x[small])
    large = x > _asym_threshold(nu)
    if large.any():
        xl = x[large]
        out[large] = (_log_ive_asym(nu, xl) + xl - nu * np.log(xl / 2.0)
                      + gammaln(nu + 1.0))
    return float(out[0]) if scalar else out


def _hankel_sum(nu, x):
    """P_nu(x) = sum_k (-1)^k a_k(nu) / x^k with optimal truncation."""
    x = np.asarray(x, dtype=float)
    four_nu2 = 4.0 * nu * nu
    total = np.ones_like(x)
    term = np.ones_like(x)
    active = np.ones(x.shape, dtype=bool)
    prev_abs = np.full(x.shape, np.inf)
    for j in range(1, 400):
        factor = -(four_nu2 - (2 * j - 1) ** 2) / (8.0 * j * x)
        new = term * factor
        mag = np.abs(new)
        # stop once the asymptotic terms start to grow or are negligible
        grow = mag >= prev_abs
        active &= ~grow
        total = np.where(active, total + new, total)
        term = np.where(active, new, term)
        prev_abs = np.where(active, mag, prev_abs)
        active &= mag > 1e-17 * np.abs(total)
        if not active.any():
            break
    return total


def _log_ive_hankel(nu, x):
    return -0.5 * np.log(2.0 * np.pi * x) + np.log(_hankel_sum(nu, x))


def _log_ive_debye(nu, x):
    x = np.asarray(x, dtype=float)
    r = np.sqrt(nu * nu + x * x)
    p = nu / r
    series = np.zeros_like(x)
    for k, coeffs in enumerate(_DEBYE_U):
        series += np.polynomial.polynomial.polyval(p, coeffs) / nu ** k
    # nu*eta - x written without cancellation
    r_minus_x = nu * nu / (r + x)
    nu_eta_minus_x = r_minus_x - nu * np.log1p((nu + r_minus_x) / x)
    return nu_eta_minus_x - 0.5 * np.log(2.0 * np.pi * r) + np.log(series)


def _log_ive_asym(nu, x):
    if nu < _DEBYE_NU_MIN:
        return _log_ive_hankel(nu, x)
    return _log_ive_debye(nu, x)


def log_ive(nu, x):
    """Exponentially scaled ``log I_nu(x) - x`` for ``nu >= 0``, ``x >= 0``.

    Returns ``-inf`` at ``x = 0`` when ``nu > 0`` and ``0`` when ``nu = 0``.
    """
    nu = float(nu)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    zero = x == 0.0
    out[zero] = 0.0 if nu == 0.0 else -np.inf
    thr = _asym_threshold(nu)
    small = (~zero) & (x <= thr)
    if small.any():
        xs = x[small]
        out[small] = (nu * np.log(xs / 2.0) - gammaln(nu + 1.0)
                      + _log_series_sum(nu, xs) - xs)
    large = x > thr
    if large.any():
        out[large] = _log_ive_asym(nu, x[large])
    return float(out[0]) if scalar else out


def log_iv(nu, x):
    """``log I_nu(x)``; never forms ``I_nu`` itself."""
    x_arr = np.asarray(x, dtype=float)
    return log_ive(nu, x_arr) + x_arr


def _ratio_cf(nu, x):
    """Gauss continued fraction for I_{nu+1}(x)/I_nu(x), modified Lentz."""
    x = np.asarray(x, dtype=float)
    f = np.full(x.shape, _TINY)
    c = f.copy()
    d = np.zeros_like(x)
    done = np.zeros(x.shape, dtype=bool)
    for k in range(1, _CF_MAX_ITER):
        b = 2.0 * (nu + k) / x
        d = b + d
        d = np.where(d == 0.0, _TINY, d)
        c = b + 1.0 / c
        c = np.where(c == 0.0, _TINY, c)
        d = 1.0 / d
        delta = c * d
        f = np.where(done, f, f * delta)
        done |= np.abs(delta - 1.0) < 4e-16
        if done.all():
            break
    return f


def _log_ratio_asym(nu, x):
    return _log_ive_asym(nu + 1.0, x) - _log_ive_asym(nu, x)


def bessel_ratio(nu, x):
    """``I_{nu+1}(x) / I_nu(x)`` for ``x >= 0``; equals 0 at ``x = 0``."""
    nu = float(nu)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.zeros_like(x)
    thr = _asym_threshold(nu)
    tiny = (x > 0.0) & (x < 1e-100)
    out[tiny] = x[tiny] / (2.0 * nu + 2.0)
    mid = (x >= 1e-100) & (x <= thr)
    if mid.any():
        out[mid] = _ratio_cf(nu, x[mid])
    large = x > thr
    if large.any():
        out[large] = np.exp(_log_ratio_asym(nu, x[large]))
    return float(out[0]) if scalar else out


def one_minus_bessel_ratio(nu, x):
    """``1 - I_{nu+1}(x) / I_nu(x)`` without cancellation at large ``x``."""
    nu = float(nu)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.ones_like(x)
    thr = _asym_threshold(nu)
    mid = (x > 0.0) & (x <= thr)
    if mid.any():
        out[mid] = 1.0 - bessel_ratio(nu, x[mid])
    large = x > thr
    if large.any():
        out[large] = -np.expm1(_log_ratio_asym(nu, x[large]))
    return float(out[0]) if scalar else out
