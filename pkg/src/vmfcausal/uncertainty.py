"""
Epistemic and aleatoric uncertainty heads, monotone fusion, calibration loss.

* Epistemic: hyperspherical entropy of the node's vMF belief (nats).
* Aleatoric: a one-hidden-layer tanh network with softplus output,
  giving a strictly positive variance.
* Fusion: ``g(a, b) = c + s1 a + s2 b + v^T tanh(W2 tanh(W1 [a, b] + b1) + b2)``
  where every multiplicative weight (``s1, s2, v, W1, W2``) is the square of
  an unconstrained parameter. Non-negative weights composed with increasing
  activations make ``g`` non-decreasing in each input for every parameter
  value.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import vmf

__all__ = [
    "UncertaintyReport",
    "AleatoricParams",
    "FusionParams",
    "epistemic",
    "epistemic_grad",
    "aleatoric",
    "aleatoric_forward",
    "aleatoric_backward",
    "fuse",
    "fuse_forward",
    "fuse_backward",
    "calibration_loss",
    "empirical_proxy",
    "windowed_proxy",
    "fit_aleatoric",
    "fit_fusion",
    "fit_linear_fusion",
]

ALEATORIC_HIDDEN = 64
FUSION_HIDDEN = 16


@dataclass
class UncertaintyReport:
    """Per-item uncertainty triple plus the optional empirical proxy."""

    u_epi: np.ndarray
    u_alea: np.ndarray
    u_total: np.ndarray
    u_emp: np.ndarray = None

    def __post_init__(self):
        if np.any(np.asarray(self.u_alea) < 0):
            raise ValueError("aleatoric variance must be non-negative")


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


def epistemic(dim, kappa):
    """``U_epi = H_sph(kappa)`` in nats."""
    return vmf.entropy(dim, kappa)


def epistemic_grad(dim, kappa):
    """``dU_epi / dkappa``."""
    return vmf.entropy_derivative(dim, kappa)


@dataclass
class AleatoricParams:
    """Weights of ``sigma^2(x) = softplus(w2^T tanh(W1 x + b1) + b2)``."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0

    @classmethod
    def init(cls, d, rng=None, hidden=ALEATORIC_HIDDEN, zero=False):
        """Glorot-scaled first layer; zero output layer (output ``log 2``)."""
        if zero:
            return cls(np.zeros((hidden, d)), np.zeros(hidden), np.zeros(hidden), 0.0)
        rng = np.random.default_rng(rng)
        W1 = rng.normal(scale=np.sqrt(2.0 / (d + hidden)), size=(hidden, d))
        return cls(W1, np.zeros(hidden), np.zeros(hidden), 0.0)


def aleatoric_forward(W1, b1, w2, b2, X):
    """Returns ``(variance, cache)`` for rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.tanh(X @ W1.T + b1)
    a = Z @ w2 + b2
    return _softplus(a), (X, Z, a)


def aleatoric_backward(dvar, W1, w2, cache):
    """Returns ``(dW1, db1, dw2, db2)``."""
    X, Z, a = cache
    da = dvar * _sigmoid(a)
    dZ = np.outer(da, w2) * (1.0 - Z * Z)
    return dZ.T @ X, dZ.sum(axis=0), Z.T @ da, float(da.sum())


def aleatoric(params, x):
    """Strictly positive aleatoric variance ``sigma^2_phi(x)``."""
    out, _ = aleatoric_forward(params.W1, params.b1, params.w2, params.b2, x)
    return float(out[0]) if np.ndim(x) == 1 else out


@dataclass
class FusionParams:
    """Raw (unconstrained) fusion parameters; effective weights are squares."""

    c: float = 0.0
    s1: float = 1.0
    s2: float = 1.0
    W1: np.ndarray = field(default_factory=lambda: np.zeros((FUSION_HIDDEN, 2)))
    b1: np.ndarray = field(default_factory=lambda: np.zeros(FUSION_HIDDEN))
    W2: np.ndarray = field(default_factory=lambda: np.zeros((FUSION_HIDDEN, FUSION_HIDDEN)))
    b2: np.ndarray = field(default_factory=lambda: np.zeros(FUSION_HIDDEN))
    v: np.ndarray = field(default_factory=lambda: np.zeros(FUSION_HIDDEN))

    @classmethod
    def pass_through(cls, hidden=FUSION_HIDDEN):
        """``g(a, b) = a + b`` exactly (nonlinear branch switched off)."""
        return cls(0.0, 1.0, 1.0, np.zeros((hidden, 2)), np.zeros(hidden),
                   np.zeros((hidden, hidden)), np.zeros(hidden), np.zeros(hidden))

    @classmethod
    def random(cls, rng=None, hidden=FUSION_HIDDEN, scale=1.0):
        rng = np.random.default_rng(rng)
        return cls(float(rng.normal()), float(rng.normal()), float(rng.normal()),
                   scale * rng.normal(size=(hidden, 2)), rng.normal(size=hidden),
                   scale * rng.normal(size=(hidden, hidden)) / np.sqrt(hidden),
                   rng.normal(size=hidden), scale * rng.normal(size=hidden))

    def as_dict(self):
        return dict(c=self.c, s1=self.s1, s2=self.s2, W1=self.W1, b1=self.b1,
                    W2=self.W2, b2=self.b2, v=self.v)


def fuse_forward(p, a, b):
    """Fusion on arrays ``a`` (epistemic) and ``b`` (aleatoric).

    ``p`` is a mapping with the :class:`FusionParams` field names.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    U = np.stack([np.ravel(a), np.ravel(b)], axis=1)
    W1e = p["W1"] ** 2
    W2e = p["W2"] ** 2
    Z1 = np.tanh(U @ W1e.T + p["b1"])
    Z2 = np.tanh(Z1 @ W2e.T + p["b2"])
    g = p["c"] + p["s1"] ** 2 * U[:, 0] + p["s2"] ** 2 * U[:, 1] + Z2 @ p["v"] ** 2
    return g, (U, Z1, Z2)


def fuse_backward(dg, p, cache):
    """Returns ``(grads, da, db)``; ``grads`` keyed like the raw parameters."""
    U, Z1, Z2 = cache
    ve = p["v"] ** 2
    dZ2 = np.outer(dg, ve) * (1.0 - Z2 * Z2)
    dW2e = dZ2.T @ Z1
    dZ1 = (dZ2 @ p["W2"] ** 2) * (1.0 - Z1 * Z1)
    dW1e = dZ1.T @ U
    dU = dZ1 @ p["W1"] ** 2
    da = dg * p["s1"] ** 2 + dU[:, 0]
    db = dg * p["s2"] ** 2 + dU[:, 1]
    grads = dict(
        c=float(dg.sum()),
        s1=float(2.0 * p["s1"] * np.sum(dg * U[:, 0])),
        s2=float(2.0 * p["s2"] * np.sum(dg * U[:, 1])),
        W1=2.0 * p["W1"] * dW1e,
        b1=dZ1.sum(axis=0),
        W2=2.0 * p["W2"] * dW2e,
        b2=dZ2.sum(axis=0),
        v=2.0 * p["v"] * (Z2.T @ dg),
    )
    return grads, da, db


def fuse(params, u_epi, u_alea):
    """Monotone fusion ``U_total = g(U_epi, U_alea)``.

    Parameters
    ----------
    params : FusionParams or mapping
    u_epi, u_alea : float or array_like

    Returns
    -------
    float or ndarray
    """
    p = params.as_dict() if isinstance(params, FusionParams) else params
    g, _ = fuse_forward(p, u_epi, u_alea)
    return float(g[0]) if np.ndim(u_epi) == 0 and np.ndim(u_alea) == 0 else g


def calibration_loss(u_total, u_emp):
    """Mean squared mismatch ``mean (U_total - U_emp)^2``."""
    a = np.asarray(u_total, dtype=float).ravel()
    b = np.asarray(u_emp, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("need at least one item")
    return float(np.mean((a - b) ** 2))


def empirical_proxy(residuals):
    """Mean squared residual over one window."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("empty residual window")
    return float(np.mean(r * r))


def windowed_proxy(sq_residuals, window=10):
    """Held-out proxy for every (t, node) from squared residuals.

    For each time ``t`` the proxy averages the squared residuals of the same
    node at the ``window`` nearest *other* time steps (half before, half
    after; shifted inward at the series ends), so item ``(t, i)`` never
    sees its own residual.

    Parameters
    ----------
    sq_residuals : ndarray of shape (T, N)
    window : int

    Returns
    -------
    ndarray of shape (T, N)
    """
    R = np.asarray(sq_residuals, dtype=float)
    T = R.shape[0]
    if T < 2:
        raise ValueError("need at least two time steps")
    w = min(int(window), T - 1)
    out = np.empty_like(R)
    csum = np.concatenate([np.zeros((1,) + R.shape[1:]), np.cumsum(R, axis=0)])
    half = w // 2
    for t in range(T):
        lo = t - half
        hi = lo + w + 1  # exclusive, includes t
        if lo < 0:
            lo, hi = 0, w + 1
        if hi > T:
            lo, hi = T - w - 1, T
        out[t] = (csum[hi] - csum[lo] - R[t]) / w
    return out


# ----------------------------------------------------------------------------
# fitting helpers


def _pack(arrs):
    return np.concatenate([np.ravel(a) for a in arrs])


def _unpack(theta, shapes):
    out, k = [], 0
    for sh in shapes:
        n = int(np.prod(sh))
        out.append(theta[k:k + n].reshape(sh))
        k += n
    return out


def fit_aleatoric(X, residuals, rng=None, hidden=ALEATORIC_HIDDEN, max_iter=500, l2=1e-4):
    """Gaussian maximum-likelihood fit of the aleatoric head.

    Minimizes ``mean(log s2(x) + r^2 / s2(x)) + l2 (||W1||^2 + ||w2||^2)``
    with L-BFGS; the small ridge term keeps the 64-unit head from fitting
    noise in the squared residuals.

    Parameters
    ----------
    X : ndarray of shape (n, d)
    residuals : ndarray of shape (n,)
        Zero-mean residuals whose conditional variance is to be learned.

    Returns
    -------
    AleatoricParams
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    r2 = np.asarray(residuals, dtype=float).ravel() ** 2
    n, d = X.shape
    p0 = AleatoricParams.init(d, rng, hidden)
    # start from the constant fit softplus(b2) = mean r^2
    b2 = float(np.log(np.expm1(max(r2.mean(), 1e-8))))
    shapes = [(hidden, d), (hidden,), (hidden,), ()]

    def obj(theta):
        W1, b1, w2, b2_ = _unpack(theta, shapes)
        s2, cache = aleatoric_forward(W1, b1, w2, float(b2_), X)
        f = float(np.mean(np.log(s2) + r2 / s2)) + l2 * (np.sum(W1 ** 2) + np.sum(w2 ** 2))
        ds2 = (1.0 / s2 - r2 / s2 ** 2) / n
        dW1, db1, dw2, db2 = aleatoric_backward(ds2, W1, w2, cache)
        return f, _pack([dW1 + 2.0 * l2 * W1, db1, dw2 + 2.0 * l2 * w2, db2])

    res = optimize.minimize(obj, _pack([p0.W1, p0.b1, p0.w2, b2]), jac=True,
                            method="L-BFGS-B", options=dict(maxiter=max_iter))
    W1, b1, w2, b2_ = _unpack(res.x, shapes)
    return AleatoricParams(W1, b1, w2, float(b2_))


_FUSION_FIELDS = ("c", "s1", "s2", "W1", "b1", "W2", "b2", "v")


def fit_fusion(u_epi, u_alea, u_emp, init=None, max_iter=500):
    """Fit the monotone fusion map to an empirical proxy by L-BFGS.

    Minimizes :func:`calibration_loss` over the raw fusion parameters,
    starting from ``init`` (by default the linear least-squares fit with a
    small nonlinear branch).

    Returns
    -------
    FusionParams
    """
    a = np.asarray(u_epi, dtype=float).ravel()
    b = np.asarray(u_alea, dtype=float).ravel()
    t = np.asarray(u_emp, dtype=float).ravel()
    if init is None:
        lin = fit_linear_fusion(a, b, t)
        rnd = FusionParams.random(0, scale=0.1)
        init = FusionParams(lin.c, lin.s1, lin.s2, rnd.W1, np.zeros(FUSION_HIDDEN),
                            rnd.W2, np.zeros(FUSION_HIDDEN),
                            np.full(FUSION_HIDDEN, 0.1))
    d0 = init.as_dict()
    shapes = [np.shape(d0[k]) for k in _FUSION_FIELDS]
    n = a.size

    def obj(theta):
        p = dict(zip(_FUSION_FIELDS, _unpack(theta, shapes)))
        g, cache = fuse_forward(p, a, b)
        gap = g - t
        grads, _, _ = fuse_backward(2.0 * gap / n, p, cache)
        return float(np.mean(gap * gap)), _pack([grads[k] for k in _FUSION_FIELDS])

    res = optimize.minimize(obj, _pack([d0[k] for k in _FUSION_FIELDS]), jac=True,
                            method="L-BFGS-B", options=dict(maxiter=max_iter))
    vals = _unpack(res.x, shapes)
    kw = {k: (float(v) if np.ndim(v) == 0 else v) for k, v in zip(_FUSION_FIELDS, vals)}
    return FusionParams(**kw)


def fit_linear_fusion(u_epi, u_alea, u_emp):
    """Least-squares fusion restricted to the linear branch.

    Solves ``min ||c + e1 a + e2 b - u_emp||^2`` with ``e1, e2 >= 0`` and
    returns pass-through-shaped parameters with ``s1 = sqrt(e1)``,
    ``s2 = sqrt(e2)`` and the nonlinear branch switched off. When the
    unconstrained solution is non-negative the two coincide.

    With two sign constraints the exact solution is found by enumerating the
    four active sets (which of ``e1, e2`` sit at zero) and keeping the
    feasible candidate with the smallest residual; the convex optimum is
    always one of them.
    """
    a = np.asarray(u_epi, dtype=float).ravel()
    b = np.asarray(u_alea, dtype=float).ravel()
    t = np.asarray(u_emp, dtype=float).ravel()
    A = np.column_stack([np.ones_like(a), a, b])
    best, best_rss = None, np.inf
    for free in ((0, 1, 2), (0, 1), (0, 2), (0,)):
        x = np.zeros(3)
        x[list(free)] = np.linalg.lstsq(A[:, free], t, rcond=None)[0]
        if np.any(x[1:] < 0):
            continue
        rss = float(np.sum((A @ x - t) ** 2))
        if rss < best_rss:
            best, best_rss = x, rss
    c, e1, e2 = best
    p = FusionParams.pass_through()
    p.c, p.s1, p.s2 = float(c), float(np.sqrt(max(e1, 0.0))), float(np.sqrt(max(e2, 0.0)))
    return p
