"""
Von Mises-Fisher primitives on the unit hypersphere S^{D-1}.

Density ``p(h | mu, kappa) = C_D(kappa) exp(kappa mu^T h)`` with

    log C_D(kappa) = nu log(kappa) - (D/2) log(2 pi) - log I_nu(kappa),
    nu = D/2 - 1.

All functions take the ambient dimension ``dim`` (``D >= 2``) and a scalar
or array ``kappa``; they return a float for scalar input and an array
otherwise. ``kappa = 0`` is handled as the exact uniform distribution.
Natural logarithms throughout.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from ._bessel import (bessel_ratio, log_ive, log_series_factor,
                      one_minus_bessel_ratio, series_regime)
from .exceptions import DomainError, SaturationError

__all__ = [
    "VmfBelief",
    "bessel_order",
    "log_sphere_volume",
    "log_normalizer",
    "mean_resultant",
    "entropy",
    "entropy_derivative",
    "log_partition_second_derivative",
    "log_density",
    "sample",
    "sample_directions",
    "fit_kappa",
    "mean_resultant_length",
]

_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 100
_SATURATION = 1.0 - 1e-12


@dataclass(frozen=True)
class VmfBelief:
    """Directional belief: mean direction ``mu`` and concentration ``kappa``."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        if mu.size < 2:
            raise DomainError("vMF dimension must be at least 2")
        if not np.all(np.isfinite(mu)) or abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise DomainError("mean direction must be a finite unit vector")
        _check_kappa(self.kappa)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self):
        return self.mu.size

    def entropy(self):
        return entropy(self.dim, self.kappa)


def _check_dim(dim):
    if int(dim) != dim or dim < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {dim!r}")
    return int(dim)


def _check_kappa(kappa, strict=False):
    k = np.asarray(kappa, dtype=float)
    if not np.all(np.isfinite(k)):
        raise DomainError("kappa must be finite")
    if strict and np.any(k <= 0):
        raise DomainError("kappa must be positive")
    if np.any(k < 0):
        raise DomainError("kappa must be non-negative")
    return k


def _ret(arr, scalar):
    return float(arr.ravel()[0]) if scalar else arr


def bessel_order(dim):
    """Order ``nu = D/2 - 1`` of the Bessel function in the normalizer."""
    return _check_dim(dim) / 2.0 - 1.0


def log_sphere_volume(dim):
    """``log Vol(S^{D-1}) = log(2 pi^{D/2} / Gamma(D/2))``."""
    dim = _check_dim(dim)
    return float(np.log(2.0) + 0.5 * dim * np.log(np.pi) - gammaln(0.5 * dim))


def log_normalizer(dim, kappa):
    """Log normalizing constant ``log C_D(kappa)``.

    Parameters
    ----------
    dim : int
        Ambient dimension ``D >= 2``.
    kappa : float or array_like
        Non-negative, finite concentration(s).

    Returns
    -------
    float or ndarray
        ``-log Vol(S^{D-1})`` at ``kappa = 0``.
    """
    dim = _check_dim(dim)
    k = _check_kappa(kappa)
    scalar = k.ndim == 0
    k = np.atleast_1d(k)
    nu = dim / 2.0 - 1.0
    out = np.full(k.shape, -log_sphere_volume(dim))
    ser = series_regime(nu, k)
    if ser.any():
        # -log C = log Vol + log S_nu(kappa): no large cancelling terms
        out[ser] -= log_series_factor(nu, k[ser])
    big = (k > 0) & ~ser
    if big.any():
        kb = k[big]
        out[big] = (nu * np.log(kb) - 0.5 * dim * np.log(2.0 * np.pi)
                    - (log_ive(nu, kb) + kb))
    return _ret(out, scalar)


def mean_resultant(dim, kappa):
    """Mean resultant length ``A_D(kappa) = I_{D/2}(kappa) / I_{D/2-1}(kappa)``.

    Equal to ``E[mu^T h]`` and to the derivative of the log-partition.
    """
    dim = _check_dim(dim)
    k = _check_kappa(kappa)
    return bessel_ratio(dim / 2.0 - 1.0, k)


def entropy(dim, kappa):
    """Differential entropy ``-log C_D(kappa) - kappa A_D(kappa)`` in nats.

    Strictly decreasing in ``kappa``; equals ``log Vol(S^{D-1})`` at zero and
    behaves like ``(D-1)/2 (1 + log(2 pi / kappa))`` for large ``kappa``.
    """
    dim = _check_dim(dim)
    k = _check_kappa(kappa)
    scalar = k.ndim == 0
    k = np.atleast_1d(k)
    nu = dim / 2.0 - 1.0
    out = np.full(k.shape, log_sphere_volume(dim))
    ser = series_regime(nu, k)
    if ser.any():
        ks = k[ser]
        out[ser] += log_series_factor(nu, ks) - ks * bessel_ratio(nu, ks)
    big = (k > 0) & ~ser
    if big.any():
        kb = k[big]
        # -log C - kappa A = (D/2) log 2pi - nu log k + log Ive + k (1 - A)
        out[big] = (0.5 * dim * np.log(2.0 * np.pi) - nu * np.log(kb)
                    + log_ive(nu, kb) + kb * one_minus_bessel_ratio(nu, kb))
    return _ret(out, scalar)


def log_partition_second_derivative(dim, kappa):
    """``A_D'(kappa) = 1 - A^2 - (D-1) A / kappa = Var(mu^T h)``.

    At ``kappa = 0`` the limit ``1/D`` is returned.
    """
    dim = _check_dim(dim)
    k = _check_kappa(kappa)
    scalar = k.ndim == 0
    k = np.atleast_1d(k)
    nu = dim / 2.0 - 1.0
    out = np.full(k.shape, 1.0 / dim)
    pos = k > 0
    if pos.any():
        kp = k[pos]
        a = bessel_ratio(nu, kp)
        om = one_minus_bessel_ratio(nu, kp)
        out[pos] = om * (1.0 + a) - (dim - 1) * a / kp
    return _ret(out, scalar)


def entropy_derivative(dim, kappa):
    """``dH/dkappa = -kappa Var(mu^T h)``; strictly negative for ``kappa > 0``."""
    k = _check_kappa(kappa, strict=True)
    out = -k * log_partition_second_derivative(dim, k)
    return out


def log_density(x, mu, kappa):
    """Log density of rows of ``x`` under vMF(``mu``, ``kappa``)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mu = np.asarray(mu, dtype=float)
    return log_normalizer(mu.size, kappa) + kappa * (x @ mu)


def _sample_cosines(dim, kappa, n, rng):
    """Wood (1994) rejection sampler for w = mu^T h. Returns (w, 1 - w)."""
    m = dim - 1.0
    if kappa == 0.0:
        z = rng.beta(m / 2.0, m / 2.0, size=n)
        return 1.0 - 2.0 * z, 2.0 * z
    root = np.sqrt(4.0 * kappa * kappa + m * m)
    b = m / (2.0 * kappa + root)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0 * x0)
    w = np.empty(n)
    omw = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        k = todo.size
        z = rng.beta(m / 2.0, m / 2.0, size=k)
        u = rng.uniform(size=k)
        den = 1.0 - (1.0 - b) * z
        cand = (1.0 - (1.0 + b) * z) / den
        cand_om = 2.0 * b * z / den
        ok = kappa * cand + m * np.log(1.0 - x0 * cand) - c >= np.log(u)
        w[todo[ok]] = cand[ok]
        omw[todo[ok]] = cand_om[ok]
        todo = todo[~ok]
    return w, omw


def sample_directions(mus, kappa, rng):
    """One vMF draw around each row of ``mus`` with common ``kappa``.

    Random-number consumption depends only on the number of rows, the
    dimension and ``kappa``, never on the mean directions themselves.
    """
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    n, dim = mus.shape
    w, omw = _sample_cosines(dim, float(kappa), n, rng)
    g = rng.standard_normal((n, dim))
    g -= np.sum(g * mus, axis=1, keepdims=True) * mus
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    sin = np.sqrt(omw * (1.0 + w))
    out = w[:, None] * mus + sin[:, None] * g
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def sample(belief, n, rng_seed=None):
    """Draw ``n`` i.i.d. unit vectors from ``belief``; deterministic in the seed.

    Returns an ``(n, D)`` array.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    mus = np.broadcast_to(belief.mu, (int(n), belief.dim))
    return sample_directions(mus, belief.kappa, rng)


def mean_resultant_length(samples):
    """Empirical mean resultant length ``|| mean(samples) ||``."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    return float(np.linalg.norm(x.mean(axis=0)))


def _solve_kappa(dim, rbar):
    if rbar <= 0.0:
        return 0.0
    if rbar >= _SATURATION:
        raise SaturationError(f"mean resultant {rbar} too close to 1")
    k = rbar * (dim - rbar * rbar) / (1.0 - rbar * rbar)
    lo, hi = 0.0, np.inf
    for _ in range(_NEWTON_MAX_ITER):
        f = mean_resultant(dim, k) - rbar
        if abs(f) <= _NEWTON_TOL:
            return k
        if f > 0:
            hi = min(hi, k)
        else:
            lo = max(lo, k)
        step = f / log_partition_second_derivative(dim, k)
        k_new = k - step
        if not (lo < k_new < hi) or not np.isfinite(k_new):
            k_new = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * k + 1.0
        k = k_new
    return k


def fit_kappa(samples):
    """Maximum-likelihood concentration for a sample of unit vectors.

    Solves ``A_D(kappa) = rbar`` by Newton iterations from the Banerjee et
    al. initializer, with bisection safeguarding.

    Raises
    ------
    SaturationError
        If the empirical mean resultant is within 1e-12 of one.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] < 2:
        raise DomainError("need at least 2 samples")
    dim = _check_dim(x.shape[1])
    return float(_solve_kappa(dim, mean_resultant_length(x)))
