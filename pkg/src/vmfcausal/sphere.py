"""
Spherical latent encoding and hypergraph message passing.

States are stored as ``(n, D)`` arrays of unit rows; row ``i`` is node ``i``.
A minibatch of ``B`` time slices over ``N`` nodes is handled as one
disconnected graph with ``B * N`` rows (slice ``b`` occupies rows
``b*N .. b*N + N - 1``), so the same code serves single steps and batches.

Each forward routine has a matching ``*_backward`` that maps an upstream
gradient to parameter and input gradients; the training module chains
them and ``training.grad_check`` verifies them against finite differences.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .exceptions import DegenerateAggregationError, DegenerateProjectionError

__all__ = [
    "SphericalState",
    "Incidence",
    "KAPPA_MIN",
    "KAPPA_MAX",
    "project_normalize",
    "project_normalize_backward",
    "concentration",
    "concentration_backward",
    "angular_attention",
    "message_passing_step",
    "message_passing_forward",
    "message_passing_backward",
    "angle_distortion",
    "jl_dimension",
]

KAPPA_MIN = 1.0
KAPPA_MAX = 200.0
EPS_NORM = 1e-12


@dataclass(frozen=True)
class SphericalState:
    """Latent direction ``h`` of node ``node_id`` at time ``t``."""

    h: np.ndarray
    node_id: int = 0
    t: int = 0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).ravel()
        if abs(np.linalg.norm(h) - 1.0) > 1e-9:
            raise ValueError("spherical state must have unit norm")
        object.__setattr__(self, "h", h)


def _normalize_rows(z, eps, exc):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        bad = np.flatnonzero(norms.ravel() <= eps)
        raise exc(f"near-zero vector at row(s) {bad[:10].tolist()}")
    return z / norms, norms


def project_normalize(W, b, x, eps=EPS_NORM):
    """Linear projection followed by unit normalization.

    Parameters
    ----------
    W : ndarray of shape (D, d)
    b : ndarray of shape (D,)
    x : ndarray of shape (d,) or (n, d)

    Returns
    -------
    ndarray of shape (D,) or (n, D)
        ``(W x + b) / ||W x + b||``.

    Raises
    ------
    DegenerateProjectionError
        If any pre-normalization norm is ``<= eps``.
    """
    x = np.asarray(x, dtype=float)
    z = x @ np.asarray(W, dtype=float).T + b
    h, _ = _normalize_rows(z, eps, DegenerateProjectionError)
    return h


def _normalize_backward(dout, h, norms):
    # d(z/|z|) = (I - h h^T) dz / |z|
    return (dout - h * np.sum(h * dout, axis=-1, keepdims=True)) / norms


def project_normalize_backward(dh, x, h, norms):
    """Gradients of ``project_normalize`` w.r.t. ``W`` and ``b``.

    ``norms`` are the pre-normalization norms, shape ``(n, 1)``.
    """
    dz = _normalize_backward(dh, h, norms)
    return dz.T @ x, dz.sum(axis=0)


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


def concentration(w, c, h):
    """Concentration head ``kappa = rho(h)`` with range ``[1, 200]``.

    A linear pre-activation ``a = w^T h + c`` goes through a softplus and
    is squashed by ``1 - exp(-s)``, which maps ``(0, inf)`` onto ``(0, 1)``::

        kappa = 1 + 199 * (1 - exp(-softplus(a))) = 1 + 199 * sigmoid(a).

    Zero weights give ``kappa = 100.5``.
    """
    a = np.asarray(h, dtype=float) @ np.asarray(w, dtype=float) + c
    s = _softplus(a)
    return KAPPA_MIN + (KAPPA_MAX - KAPPA_MIN) * -np.expm1(-s)


def concentration_backward(dkappa, w, c, h):
    """Returns ``(dw, dc, dh)`` for upstream ``dkappa`` of shape ``(n,)``."""
    h = np.atleast_2d(h)
    a = h @ w + c
    sig = _sigmoid(a)
    da = dkappa * (KAPPA_MAX - KAPPA_MIN) * sig * (1.0 - sig)
    return h.T @ da, float(da.sum()), np.outer(da, w)


def angular_attention(h_i, neighbors, kappa_a):
    """Softmax of ``kappa_a * h_i^T h_j`` over the neighbors ``h_j``.

    Parameters
    ----------
    h_i : ndarray of shape (D,)
    neighbors : ndarray of shape (m, D)
        Non-empty.
    kappa_a : float
        Positive temperature.

    Returns
    -------
    ndarray of shape (m,)
        Positive weights summing to one.
    """
    nb = np.atleast_2d(np.asarray(neighbors, dtype=float))
    if nb.shape[0] == 0:
        raise ValueError("neighbors must be non-empty")
    if not kappa_a > 0:
        raise ValueError("kappa_a must be positive")
    s = kappa_a * (nb @ np.asarray(h_i, dtype=float))
    e = np.exp(s - s.max())
    return e / e.sum()


class Incidence:
    """Flattened hyperedge membership for grouped attention.

    Every (hyperedge, member ``i``) pair is a *slot*; each slot attends over
    all members ``j`` of its hyperedge. Pairs are stored contiguously per
    slot so segment reductions can use ``reduceat``.
    """

    def __init__(self, hyperedges, n_nodes):
        self.n_nodes = int(n_nodes)
        slot_node, pi, pj, ps = [], [], [], []
        n_slots = 0
        for e in hyperedges:
            m = np.unique(np.asarray(e, dtype=np.int64))
            if m.size < 2:
                raise ValueError("hyperedges need at least 2 distinct members")
            if m[0] < 0 or m[-1] >= n_nodes:
                raise ValueError("hyperedge member out of range")
            k = m.size
            slot_node.append(m)
            pi.append(np.repeat(m, k))
            pj.append(np.tile(m, k))
            ps.append(n_slots + np.repeat(np.arange(k), k))
            n_slots += k
        self.n_slots = n_slots
        if n_slots == 0:
            self.slot_node = np.zeros(0, dtype=np.int64)
            self.pair_i = self.pair_j = self.pair_slot = np.zeros(0, dtype=np.int64)
            self.slot_start = np.zeros(0, dtype=np.int64)
            self.deg = np.zeros(self.n_nodes)
            self.mean_op = sparse.csr_matrix((self.n_nodes, 0))
            return
        self.slot_node = np.concatenate(slot_node)
        self.pair_i = np.concatenate(pi)
        self.pair_j = np.concatenate(pj)
        self.pair_slot = np.concatenate(ps)
        sizes = np.bincount(self.pair_slot, minlength=n_slots)
        self.slot_start = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.deg = np.bincount(self.slot_node, minlength=self.n_nodes).astype(float)
        self.mean_op = sparse.csr_matrix(
            (1.0 / self.deg[self.slot_node], (self.slot_node, np.arange(n_slots))),
            shape=(self.n_nodes, n_slots))

    @classmethod
    def from_slices(cls, edge_lists, n_nodes):
        """Stack per-slice hyperedge lists into one block-diagonal incidence."""
        edges = [np.asarray(e) + b * n_nodes
                 for b, el in enumerate(edge_lists) for e in el]
        return cls(edges, n_nodes * len(edge_lists))

    def pair_matrix(self, data, rows, cols, shape):
        return sparse.csr_matrix((data, (rows, cols)), shape=shape)


def _segment_softmax(s, inc):
    m = np.maximum.reduceat(s, inc.slot_start)
    e = np.exp(s - m[inc.pair_slot])
    z = np.add.reduceat(e, inc.slot_start)
    return e / z[inc.pair_slot]


def message_passing_forward(H, inc, log_kappa_a, W_c=None, G=None, HP=None,
                            eps=EPS_NORM):
    """One attention + causal layer on stacked states.

    Parameters
    ----------
    H : ndarray of shape (B*N, D)
        Current unit states.
    inc : Incidence
        Hyperedges over the ``B*N`` rows.
    log_kappa_a : float
        Log attention temperature.
    W_c : ndarray of shape (D, D), optional
        Causal projection.
    G : ndarray of shape (N, N), optional
        Effective causal weights, ``G[i, j]`` for parent ``j`` of ``i``.
    HP : ndarray of shape (B*N, D), optional
        Parent states fed to the causal term (defaults to ``H``).

    Returns
    -------
    out : ndarray of shape (B*N, D)
    cache : dict
        Intermediates for :func:`message_passing_backward`.
    """
    n, D = H.shape
    ka = float(np.exp(log_kappa_a))
    z = H.copy()
    alpha = None
    if inc.n_slots:
        s = ka * np.sum(H[inc.pair_i] * H[inc.pair_j], axis=1)
        alpha = _segment_softmax(s, inc)
        A = inc.pair_matrix(alpha, inc.pair_slot, inc.pair_j, (inc.n_slots, n))
        agg = A @ H
        z += inc.mean_op @ agg
    P = None
    if G is not None and W_c is not None:
        N = G.shape[0]
        HP_ = H if HP is None else HP
        P = (HP_ @ W_c.T).reshape(-1, N, D)
        z += np.einsum("ij,bjd->bid", G, P).reshape(n, D)
    out, norms = _normalize_rows(z, eps, DegenerateAggregationError)
    cache = dict(H=H, inc=inc, ka=ka, alpha=alpha, W_c=W_c, G=G, HP=HP, P=P,
                 out=out, norms=norms)
    return out, cache


def message_passing_backward(dout, cache):
    """Backward pass of :func:`message_passing_forward`.

    Returns
    -------
    dict with keys ``H``, ``log_kappa_a``, ``W_c``, ``G``, ``HP`` (the last
    three are ``None`` when the causal term is absent; ``HP`` is ``None``
    when the parent states were ``H`` itself, in which case their gradient is
    folded into ``H``).
    """
    H, inc, ka = cache["H"], cache["inc"], cache["ka"]
    n, D = H.shape
    dz = _normalize_backward(dout, cache["out"], cache["norms"])
    dH = dz.copy()
    dlogka = 0.0
    if inc.n_slots:
        alpha = cache["alpha"]
        dagg = inc.mean_op.T @ dz
        # agg[slot] = sum_p alpha_p H[j_p]
        A = inc.pair_matrix(alpha, inc.pair_slot, inc.pair_j, (inc.n_slots, n))
        dH += A.T @ dagg
        dalpha = np.sum(dagg[inc.pair_slot] * H[inc.pair_j], axis=1)
        inner = np.add.reduceat(alpha * dalpha, inc.slot_start)
        ds = alpha * (dalpha - inner[inc.pair_slot])
        dots = np.sum(H[inc.pair_i] * H[inc.pair_j], axis=1)
        dlogka = ka * float(np.sum(ds * dots))
        Ds = inc.pair_matrix(ka * ds, inc.pair_i, inc.pair_j, (n, n))
        dH += Ds @ H + Ds.T @ H
    res = {"H": dH, "log_kappa_a": dlogka, "W_c": None, "G": None, "HP": None}
    if cache["P"] is not None:
        G, W_c, P = cache["G"], cache["W_c"], cache["P"]
        N = G.shape[0]
        dzb = dz.reshape(-1, N, D)
        dP = np.einsum("ij,bid->bjd", G, dzb)
        res["G"] = np.einsum("bid,bjd->ij", dzb, P)
        HP = H if cache["HP"] is None else cache["HP"]
        dP2 = dP.reshape(n, D)
        res["W_c"] = dP2.T @ HP
        dHP = dP2 @ W_c
        if cache["HP"] is None:
            res["H"] = dH + dHP
        else:
            res["HP"] = dHP
    return res


def message_passing_step(states, hyperedges, kappa_a, W_c=None, gates=None,
                         parent_states=None):
    """Single message-passing update of all node states at one time.

    Each node ``i`` receives the mean over its incident hyperedges of the
    attention-weighted member states, plus ``sum_j gates[i, j] W_c h_j``
    over parents ``j`` (rows of ``parent_states``, default ``states``),
    plus its own state; the sum is renormalized.

    Parameters
    ----------
    states : ndarray of shape (N, D)
    hyperedges : list of array_like of int, or Incidence
    kappa_a : float
        Positive attention temperature.
    W_c : ndarray of shape (D, D), optional
    gates : ndarray of shape (N, N), optional
        Zero where ``j`` is not a parent of ``i``.
    parent_states : ndarray of shape (N, D), optional
        Lagged states for the causal term.

    Raises
    ------
    DegenerateAggregationError
        If the aggregated vector of some node is exactly zero.
    """
    H = np.asarray(states, dtype=float)
    inc = hyperedges if isinstance(hyperedges, Incidence) else Incidence(hyperedges, H.shape[0])
    if not kappa_a > 0:
        raise ValueError("kappa_a must be positive")
    out, _ = message_passing_forward(H, inc, np.log(kappa_a), W_c, gates, parent_states)
    return out


def angle_distortion(X, W):
    """Largest change in pairwise cosine similarity under ``x -> W x``.

    Parameters
    ----------
    X : ndarray of shape (n, d), ``n >= 2``
    W : ndarray of shape (D, d)

    Returns
    -------
    float
        ``max_{u,v} |cos(Wu, Wv) - cos(u, v)|``.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("need at least two points")
    U, _ = _normalize_rows(X, EPS_NORM, DegenerateProjectionError)
    V, _ = _normalize_rows(X @ np.asarray(W, dtype=float).T, EPS_NORM,
                           DegenerateProjectionError)
    return float(np.max(np.abs(V @ V.T - U @ U.T)))


def jl_dimension(n_points, eps):
    """Target dimension ``ceil(8 ln(n) / eps^2)``."""
    return int(np.ceil(8.0 * np.log(n_points) / eps ** 2))
