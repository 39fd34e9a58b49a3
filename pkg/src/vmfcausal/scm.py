"""
Structural causal model over spherical latents.

For node ``i`` at time ``t`` the deterministic direction is

    m_i(t) = sum_{j in Pa(i)} G_ij W_c h_j(t-1) + f_i W_x x_i(t) + s_i u_i

with ``G = gates * beta``; the state is one vMF(normalize(m_i), kappa) draw.
Interventions pin chosen nodes to fixed unit vectors (their assignment is
deleted) and the outcome ``Y = sum_{r in R} w_r^T h_r(T)`` is read at the
horizon. Monte Carlo samples are simulated in blocks; block ``b`` draws
from ``SeedSequence([seed, b])`` so results do not depend on how many
blocks were requested before it.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import vmf
from .exceptions import DegenerateProjectionError
from .structure import _Design, _ols

__all__ = [
    "ScmModel",
    "InterventionSpec",
    "StructurePosterior",
    "IdentificationReport",
    "KAPPA_CLAMP",
    "forward_step",
    "simulate",
    "intervene",
    "causal_entropy",
    "histogram_entropy",
    "gaussian_entropy",
    "posterior_weights",
    "identification_confidence",
    "fit_structural_maps",
    "ancestors",
    "histogram_l1",
]

KAPPA_CLAMP = 1e6
VARIANCE_FLOOR = 1e-12
BLOCK = 128


@dataclass
class ScmModel:
    """Parameters of the spherical structural model.

    Attributes
    ----------
    parents : tuple of tuple of int
        ``parents[i]`` is the (ordered) parent set of node ``i``; all edges
        act with lag one.
    gates, beta : ndarray of shape (N, N)
        Gate factors and structural coefficients; ``G = gates * beta`` must
        vanish outside the parent sets.
    W_c : ndarray of shape (D, D)
    exo_dir : ndarray of shape (N, D)
        Unit exogenous bias directions ``u_i``.
    exo_strength : ndarray of shape (N,)
    noise_kappa : float
        vMF noise concentration, clamped to ``1e6``.
    W_x : ndarray of shape (D, d) or None
    feat_weight : ndarray of shape (N,) or None
    readout_nodes : ndarray of int
    readout_w : ndarray of shape (len(readout_nodes), D)
    sparsity_s : int
    """

    parents: tuple
    gates: np.ndarray
    beta: np.ndarray
    W_c: np.ndarray
    exo_dir: np.ndarray
    exo_strength: np.ndarray
    noise_kappa: float
    W_x: np.ndarray = None
    feat_weight: np.ndarray = None
    readout_nodes: np.ndarray = None
    readout_w: np.ndarray = None
    sparsity_s: int = None

    def __post_init__(self):
        self.parents = tuple(tuple(int(j) for j in pa) for pa in self.parents)
        N = len(self.parents)
        self.gates = np.asarray(self.gates, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.W_c = np.asarray(self.W_c, dtype=float)
        D = self.W_c.shape[0]
        mask = np.zeros((N, N), dtype=bool)
        for i, pa in enumerate(self.parents):
            if i in pa:
                raise ValueError(f"node {i} lists itself as a parent")
            mask[i, list(pa)] = True
        if np.any((self.gates * self.beta)[~mask] != 0):
            raise ValueError("non-zero causal weight outside the parent sets")
        if np.any((self.gates < 0) | (self.gates > 1)):
            raise ValueError("gates must lie in [0, 1]")
        s = max((len(p) for p in self.parents), default=0)
        if self.sparsity_s is None:
            self.sparsity_s = s
        elif s > self.sparsity_s:
            raise ValueError("parent set larger than the sparsity bound")
        self.exo_dir = np.asarray(self.exo_dir, dtype=float).reshape(N, D)
        self.exo_strength = np.asarray(self.exo_strength, dtype=float).reshape(N)
        k = float(self.noise_kappa)
        if not k > 0:
            raise ValueError("noise_kappa must be positive")
        self.noise_kappa = min(k, KAPPA_CLAMP)
        if self.feat_weight is None:
            self.feat_weight = np.zeros(N)
        self.feat_weight = np.asarray(self.feat_weight, dtype=float)
        if self.readout_nodes is None:
            self.readout_nodes = np.arange(N)
        self.readout_nodes = np.asarray(self.readout_nodes, dtype=int)
        if self.readout_w is None:
            self.readout_w = np.zeros((self.readout_nodes.size, D))
            self.readout_w[:, 0] = 1.0
        self.readout_w = np.asarray(self.readout_w, dtype=float)

    @property
    def n_nodes(self):
        return len(self.parents)

    @property
    def dim(self):
        return self.W_c.shape[0]

    @property
    def weights(self):
        return self.gates * self.beta

    def edges(self):
        return [(j, i) for i, pa in enumerate(self.parents) for j in pa]

    def readout(self, states):
        """``Y = sum_r w_r^T h_r`` for states of shape (..., N, D)."""
        H = np.asarray(states)[..., self.readout_nodes, :]
        return np.sum(H * self.readout_w, axis=(-1, -2))


@dataclass
class InterventionSpec:
    """Pin ``targets`` (node -> unit vector) from ``start_t`` on.

    ``mode="sustained"`` pins for every ``t >= start_t``; ``mode="pulse"``
    pins at ``t == start_t`` only. Time steps are numbered ``1..horizon``.
    """

    targets: dict
    start_t: int = 1
    horizon: int = 1
    n_samples: int = 100
    mode: str = "sustained"

    def __post_init__(self):
        self.targets = {int(k): np.asarray(v, dtype=float).ravel()
                        for k, v in self.targets.items()}
        for k, v in self.targets.items():
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"intervention value for node {k} is not unit norm")
        if self.horizon < 1 or self.n_samples < 1:
            raise ValueError("horizon and n_samples must be >= 1")
        if self.mode not in ("sustained", "pulse"):
            raise ValueError(f"unknown intervention mode {self.mode!r}")

    def active(self, t):
        if self.mode == "pulse":
            return t == self.start_t
        return t >= self.start_t


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _step(model, prev, x_t, rng, pinned=None):
    """Batched assignment: ``prev`` has shape (S, N, D)."""
    S, N, D = prev.shape
    m = np.einsum("ij,sjd->sid", model.weights, prev @ model.W_c.T)
    if x_t is not None and model.W_x is not None:
        m = m + model.feat_weight[:, None] * (np.asarray(x_t) @ model.W_x.T)
    m = m + (model.exo_strength[:, None] * model.exo_dir)
    if pinned:
        for node, h in pinned.items():
            m[:, node, :] = h
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise DegenerateProjectionError("zero deterministic direction in structural map")
    mu = (m / norms).reshape(S * N, D)
    out = vmf.sample_directions(mu, model.noise_kappa, rng).reshape(S, N, D)
    if pinned:
        for node, h in pinned.items():
            out[:, node, :] = h
    return out


def forward_step(model, prev_states, x_t=None, rng_seed=None):
    """One structural assignment for all nodes.

    Parameters
    ----------
    model : ScmModel
    prev_states : ndarray of shape (N, D)
    x_t : ndarray of shape (N, d), optional
    rng_seed : int or Generator

    Returns
    -------
    ndarray of shape (N, D)
    """
    prev = np.asarray(prev_states, dtype=float)[None]
    return _step(model, prev, x_t, _rng(rng_seed))[0]


def simulate(model, init_states, features=None, rng_seed=None, horizon=None,
             spec=None):
    """Apply :func:`forward_step` ``T`` times from ``init_states``.

    Parameters
    ----------
    init_states : ndarray of shape (N, D)
    features : ndarray of shape (T, N, d), optional
        ``features[t-1]`` feeds step ``t``.
    horizon : int, optional
        Required when ``features`` is None.
    spec : InterventionSpec, optional
        Nodes to pin (its ``horizon`` and ``n_samples`` are ignored).

    Returns
    -------
    ndarray of shape (T, N, D)
        States at ``t = 1..T``.
    """
    T = horizon if features is None else len(features)
    if T is None or T < 1:
        raise ValueError("horizon must be >= 1")
    rng = _rng(rng_seed)
    h = np.asarray(init_states, dtype=float)[None]
    traj = np.empty((T,) + h.shape[1:])
    for t in range(1, T + 1):
        x = None if features is None else features[t - 1]
        pinned = spec.targets if spec is not None and spec.active(t) else None
        h = _step(model, h, x, rng, pinned)
        traj[t - 1] = h[0]
    return traj


def intervene(model, spec, init_states, features=None, rng_seed=0):
    """Monte Carlo outcome samples under ``do(h*)``.

    Returns
    -------
    ndarray of shape (spec.n_samples,)
    """
    for node in spec.targets:
        if not 0 <= node < model.n_nodes:
            raise KeyError(f"unknown intervention target {node}")
    if features is not None and len(features) < spec.horizon:
        raise ValueError("features shorter than the horizon")
    init = np.asarray(init_states, dtype=float)
    S = spec.n_samples
    out = np.empty(S)
    for b, lo in enumerate(range(0, S, BLOCK)):
        m = min(BLOCK, S - lo)
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), b]))
        h = np.broadcast_to(init, (m,) + init.shape).copy()
        for t in range(1, spec.horizon + 1):
            x = None if features is None else features[t - 1]
            pinned = spec.targets if spec.active(t) else None
            h = _step(model, h, x, rng, pinned)
        out[lo:lo + m] = model.readout(h)
    return out


def gaussian_entropy(variance):
    """``0.5 log(2 pi e variance)``."""
    return 0.5 * np.log(2.0 * np.pi * np.e * variance)


def histogram_entropy(samples):
    """Plug-in differential entropy on Freedman-Diaconis bins."""
    y = np.asarray(samples, dtype=float).ravel()
    q75, q25 = np.percentile(y, [75, 25])
    width = 2.0 * (q75 - q25) * y.size ** (-1.0 / 3.0)
    span = y.max() - y.min()
    if width <= 0 or span <= 0:
        return gaussian_entropy(VARIANCE_FLOOR)
    nb = max(1, int(np.ceil(span / width)))
    counts, edges = np.histogram(y, bins=nb)
    p = counts[counts > 0] / y.size
    w = edges[1] - edges[0]
    return float(-np.sum(p * np.log(p / w)))


def causal_entropy(samples, method="gaussian", floor=VARIANCE_FLOOR,
                   return_flag=False):
    """Entropy (nats) of the interventional outcome distribution.

    Parameters
    ----------
    samples : array_like of shape (S,), ``S >= 2``
    method : {"gaussian", "histogram"}
    floor : float
        Variance floor of the Gaussian plug-in.
    return_flag : bool
        Also return whether the sample variance fell below the floor.
    """
    y = np.asarray(samples, dtype=float).ravel()
    if y.size < 2:
        raise ValueError("need at least two samples")
    var = float(np.var(y, ddof=1))
    degenerate = var < floor
    if method == "gaussian":
        h = float(gaussian_entropy(max(var, floor)))
    elif method == "histogram":
        h = histogram_entropy(y)
    else:
        raise ValueError(f"unknown entropy estimator {method!r}")
    return (h, degenerate) if return_flag else h


def histogram_l1(a, b, bins=64):
    """L1 distance between normalized histograms of two samples on shared bins.

    The bins split ``[min, max]`` of the pooled samples evenly, so the value
    lies in ``[0, 2]``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    pa, _ = np.histogram(a, bins, (lo, hi))
    pb, _ = np.histogram(b, bins, (lo, hi))
    return float(np.abs(pa / a.size - pb / b.size).sum())


def ancestors(model, node):
    """All nodes with a directed (lagged) path into ``node``."""
    seen, stack = set(), [int(node)]
    while stack:
        for j in model.parents[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    seen.discard(int(node))
    return seen


# ----------------------------------------------------------------------------
# identification confidence


@dataclass
class StructurePosterior:
    """Normalized weights over candidate parent sets of one node."""

    candidates: list
    map_confidence: float

    def __post_init__(self):
        w = np.array([c[1] for c in self.candidates], dtype=float)
        if w.size == 0 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("posterior weights must be positive and sum to one")


@dataclass
class IdentificationReport:
    per_node: dict
    overall: float
    bics: dict = field(default_factory=dict)


def posterior_weights(bics):
    """``w_k ∝ exp(-BIC_k / 2)`` computed stably."""
    b = np.asarray(bics, dtype=float)
    if b.size == 0:
        raise ValueError("no candidates")
    a = -0.5 * (b - b.min())
    w = np.exp(a)
    w = np.maximum(w / w.sum(), np.finfo(float).tiny)
    return w / w.sum()


def identification_confidence(data, candidate_structures, s=2, top_m=4, lag=2, k=None):
    """Posterior mass of the best parent set per node.

    Parameters
    ----------
    data : ndarray of shape (T, N, D)
        Latent series.
    candidate_structures : list of EdgeScore, or dict node -> list of parent tuples
        Scored edges (the ``top_m`` best sources of each node are expanded
        into all subsets of size ``<= s``), or explicit candidate sets.

    Returns
    -------
    IdentificationReport
        Per-node :class:`StructurePosterior`; ``overall`` is the geometric
        mean of the per-node MAP confidences.
    """
    des = _Design(data, lag, k)
    N = des.N
    if isinstance(candidate_structures, dict):
        sets = {i: [tuple(sorted(c)) for c in candidate_structures.get(i, [])]
                for i in range(N)}
    else:
        scored = {i: [] for i in range(N)}
        for e in candidate_structures:
            scored[e.dst].append((e.score, e.src))
        sets = {}
        for i in range(N):
            top = [j for _, j in sorted(scored[i], key=lambda x: (-x[0], x[1]))[:top_m]]
            sets[i] = [tuple(sorted(c)) for r in range(0, min(s, len(top)) + 1)
                       for c in itertools.combinations(top, r)]
    per_node, bics = {}, {}
    for i in range(N):
        if not sets[i]:
            raise ValueError(f"no candidate parent sets for node {i}")
        Y = des.response(i)
        n_obs = Y.size
        base = [np.ones((des.n, 1)), des.blocks[i]]
        b_i = []
        for pa in sets[i]:
            X = np.hstack(base + [des.blocks[j] for j in pa])
            _, _, rss, _ = _ols(X, Y)
            n_par = X.shape[1] * Y.shape[1]
            b_i.append(n_obs * np.log(max(rss, 1e-300) / n_obs) + n_par * np.log(n_obs))
        w = posterior_weights(b_i)
        order = np.argsort(-w, kind="stable")
        cands = [(sets[i][o], float(w[o])) for o in order]
        per_node[i] = StructurePosterior(cands, cands[0][1])
        bics[i] = b_i
    overall = float(np.exp(np.mean([np.log(p.map_confidence) for p in per_node.values()])))
    return IdentificationReport(per_node, overall, bics)


# ----------------------------------------------------------------------------
# fitting structural maps to observed latents


def _neg_mean_cos(theta, H, P, F):
    """Negative mean cosine between states and normalized linear predictors.

    ``P`` (k, n, D) parent inputs, ``F`` (n, D) feature input or None.
    ``theta = [beta (k), f (0/1), b (D)]``.
    """
    k = P.shape[0]
    D = H.shape[1]
    beta = theta[:k]
    off = k
    m = np.tensordot(beta, P, axes=1) if k else np.zeros_like(H)
    if F is not None:
        m = m + theta[off] * F
        off += 1
    m = m + theta[off:off + D]
    nm = np.linalg.norm(m, axis=1, keepdims=True)
    nm = np.maximum(nm, 1e-300)
    mu = m / nm
    c = np.sum(mu * H, axis=1)
    dm = (H - mu * c[:, None]) / nm / H.shape[0]
    g = []
    if k:
        g.append(np.einsum("knd,nd->k", P, dm))
    if F is not None:
        g.append([np.sum(F * dm)])
    g.append(dm.sum(axis=0))
    return -float(c.mean()), -np.concatenate([np.ravel(x) for x in g])


def fit_structural_maps(latents, parents, W_c, features=None, W_x=None,
                        readout_nodes=None, readout_w=None, sparsity_s=None):
    """Maximum-likelihood structural maps for fixed parent sets.

    For each node the scalar parent weights, the feature weight and a free
    bias vector are fitted by maximizing the vMF log-likelihood (for fixed
    concentration this maximizes the mean cosine between states and
    predicted directions), starting from a least-squares fit. The common
    noise concentration is then the ML solution of ``A_D(kappa) = mean
    cosine`` across nodes.

    Parameters
    ----------
    latents : ndarray of shape (T, N, D)
    parents : sequence of tuples, or CandidateStructure
    W_c : ndarray of shape (D, D)
    features : ndarray of shape (T, N, d), optional
        Aligned with ``latents`` (``features[t]`` drives ``latents[t]``).
    W_x : ndarray of shape (D, d), optional

    Returns
    -------
    ScmModel
    """
    H = np.asarray(latents, dtype=float)
    T, N, D = H.shape
    if hasattr(parents, "parents"):
        if sparsity_s is None:
            sparsity_s = parents.sparsity_s
        parents = [parents.parents.get(i, ()) for i in range(N)]
    parents = [tuple(p) for p in parents]
    beta = np.zeros((N, N))
    gates = np.zeros((N, N))
    exo_dir = np.zeros((N, D))
    exo_str = np.zeros(N)
    fw = np.zeros(N)
    cos_all = []
    PC = H @ W_c.T  # W_c h_j(t)
    for i in range(N):
        pa = parents[i]
        Hi = H[1:, i, :]
        n = Hi.shape[0]
        P = np.stack([PC[:-1, j, :] for j in pa]) if pa else np.zeros((0, n, D))
        F = None
        if features is not None and W_x is not None:
            F = np.asarray(features)[1:, i, :] @ W_x.T
        cols = [P[k].ravel() for k in range(len(pa))]
        if F is not None:
            cols.append(F.ravel())
        cols.extend(np.tile(np.eye(D)[d], n) for d in range(D))
        A = np.stack(cols, axis=1)
        theta0, *_ = np.linalg.lstsq(A, Hi.ravel(), rcond=None)
        res = optimize.minimize(_neg_mean_cos, theta0, args=(Hi, P, F), jac=True,
                                method="L-BFGS-B", options=dict(maxiter=500, gtol=1e-10))
        theta = res.x
        k = len(pa)
        beta[i, list(pa)] = theta[:k]
        gates[i, list(pa)] = 1.0
        off = k
        if F is not None:
            fw[i] = theta[off]
            off += 1
        b = theta[off:off + D]
        exo_str[i] = np.linalg.norm(b)
        exo_dir[i] = b / exo_str[i] if exo_str[i] > 0 else np.eye(D)[0]
        cos_all.append(-res.fun)
    rbar = float(np.mean(cos_all))
    kappa = vmf._solve_kappa(D, rbar) if rbar < 1 - 1e-12 else KAPPA_CLAMP
    return ScmModel(parents, gates, beta, W_c, exo_dir, exo_str, max(kappa, 1e-8),
                    W_x=W_x, feat_weight=fw, readout_nodes=readout_nodes,
                    readout_w=readout_w, sparsity_s=sparsity_s)
