"""
Sparse lagged structure discovery on per-node multivariate series.

Pipeline: :func:`var_init` fits a lag-``p`` vector autoregression for each
destination node on the lagged coordinates of every node (grouped by
source), scores each source group by the Frobenius norm of its
coefficients and tests it with a pooled group F-test under
Benjamini-Hochberg control. :func:`lasso_refine` then runs a group lasso
over the significant sources of each node and keeps at most ``s`` parents.
All edges act with lag >= 1; no contemporaneous edges are ever formed.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

__all__ = [
    "EdgeScore",
    "CandidateStructure",
    "RankDeficiencyWarning",
    "var_init",
    "lasso_refine",
    "select_lambda",
    "gate_scores",
    "gate_matrix",
    "rank_edges",
    "marginal_correlation_ranking",
    "benjamini_hochberg",
    "write_edges",
    "read_edges",
]

RIDGE = 1e-6
LASSO_TOL = 1e-8


class RankDeficiencyWarning(UserWarning):
    """Design matrix is (numerically) rank deficient; ridge added."""


@dataclass(frozen=True)
class EdgeScore:
    """Lagged influence score of ``src`` on ``dst``."""

    src: int
    dst: int
    score: float
    significant: bool
    pvalue: float = float("nan")

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("self edges are not scored")
        if not self.score >= 0:
            raise ValueError("score must be non-negative")


@dataclass
class CandidateStructure:
    """Parent sets with a cardinality bound."""

    parents: dict
    sparsity_s: int
    strength: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, pa in self.parents.items():
            if len(pa) > self.sparsity_s:
                raise ValueError(f"node {i} has {len(pa)} > s parents")
            if i in pa:
                raise ValueError("self parent")

    def edges(self):
        return [(j, i) for i in sorted(self.parents) for j in self.parents[i]]


# ----------------------------------------------------------------------------
# design construction


def _as_series(latent_series):
    Z = np.asarray(latent_series, dtype=float)
    if Z.ndim == 2:
        Z = Z[:, :, None]
    if Z.ndim != 3:
        raise ValueError("series must have shape (T, N, D)")
    if not np.all(np.isfinite(Z)):
        raise ValueError("series contains non-finite values")
    return Z


def n_components(T, N, D, lag):
    """Per-node coordinate count keeping ``N * lag * k <= (T - lag) / 3``."""
    k = int((T - lag) / 3.0 // (N * lag))
    return int(min(D, max(1, k)))


def _reduce(Z, k, rtol=1e-8):
    """Per-node principal-component coordinates (centered).

    Each node keeps at most ``k`` components and never more than its
    numerical rank (singular values above ``rtol`` times the largest), so
    latents confined to a subspace (e.g. a normalized linear image of
    lower-dimensional features) do not make the design singular.
    """
    T, N, D = Z.shape
    out = []
    for i in range(N):
        Xi = Z[:, i, :] - Z[:, i, :].mean(axis=0)
        _, sv, Vt = np.linalg.svd(Xi, full_matrices=False)
        rank = int(np.sum(sv > rtol * max(sv[0], 1e-300))) if sv.size else 0
        ki = max(1, min(k, rank))
        if ki >= D:
            out.append(Xi)
        else:
            out.append(Xi @ Vt[:ki].T)
    return out


def _lagged(Zi, lag):
    T = Zi.shape[0]
    return np.hstack([Zi[lag - l:T - l] for l in range(1, lag + 1)])


class _Design:
    """Shared lagged design: responses and grouped lag blocks per node."""

    def __init__(self, latent_series, lag, k=None):
        Z = _as_series(latent_series)
        T, N, D = Z.shape
        if T < 10 * lag:
            raise ValueError(f"series too short: T={T} < {10 * lag}")
        self.lag, self.N = lag, N
        self.k = n_components(T, N, D, lag) if k is None else int(k)
        self.coords = _reduce(Z, self.k)
        self.blocks = [_lagged(c, lag) for c in self.coords]
        self.n = T - lag

    def response(self, i):
        return self.coords[i][self.lag:]


def _ols(X, Y):
    """Least squares with rank check; returns (B, XtX^-1, rss, rank_ok)."""
    XtX = X.T @ X
    p = XtX.shape[0]
    rank = np.linalg.matrix_rank(X)
    ok = rank == p
    if not ok:
        warnings.warn(f"rank-deficient design ({rank} < {p}); ridge {RIDGE} added",
                      RankDeficiencyWarning, stacklevel=3)
        XtX = XtX + RIDGE * np.eye(p)
    inv = np.linalg.pinv(XtX) if not ok else np.linalg.inv(XtX)
    B = inv @ (X.T @ Y)
    resid = Y - X @ B
    return B, inv, float(np.sum(resid * resid)), ok


def benjamini_hochberg(pvalues, alpha):
    """Boolean rejections at false-discovery level ``alpha``."""
    p = np.asarray(pvalues, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    thresh = alpha * np.arange(1, m + 1) / m
    below = p[order] <= thresh
    rej = np.zeros(m, dtype=bool)
    if below.any():
        kmax = np.flatnonzero(below).max()
        rej[order[:kmax + 1]] = True
    return rej


def var_init(latent_series, lag=2, alpha=0.01, k=None):
    """Lag-``p`` VAR scores and group F-tests for every ordered pair.

    Parameters
    ----------
    latent_series : ndarray of shape (T, N, D)
        Per-node coordinates over time (e.g. latent unit vectors).
    lag : int
    alpha : float
        Benjamini-Hochberg level for the group tests.
    k : int, optional
        Coordinates kept per node (principal components). By default the
        raw ``D`` coordinates when the design is narrow enough, otherwise
        reduced so that ``N * lag * k <= (T - lag) / 3``.

    Returns
    -------
    list of EdgeScore
        All ``N (N - 1)`` ordered pairs.
    """
    des = _Design(latent_series, lag, k)
    N, n = des.N, des.n
    ones = np.ones((n, 1))
    raw = []
    # the regressors are shared by every destination node: factor once
    X = np.hstack([ones] + des.blocks)
    sizes = [b.shape[1] for b in des.blocks]
    starts = 1 + np.concatenate([[0], np.cumsum(sizes)[:-1]])
    P = X.shape[1]
    Yall = np.hstack([des.response(i) for i in range(N)])
    Ball, inv, _, _ = _ols(X, Yall)
    Rall = Yall - X @ Ball
    cols = np.cumsum([0] + [des.response(i).shape[1] for i in range(N)])
    Vblocks = [np.linalg.inv(inv[starts[j]:starts[j] + sizes[j],
                                 starts[j]:starts[j] + sizes[j]]) for j in range(N)]
    for i in range(N):
        ci = slice(cols[i], cols[i + 1])
        B = Ball[:, ci]
        r = B.shape[1]
        rss = float(np.sum(Rall[:, ci] ** 2))
        df2 = r * (n - P)
        if df2 <= 0:
            raise ValueError("not enough windows for the VAR design")
        sigma2 = rss / df2
        for j in range(N):
            if j == i:
                continue
            sl = slice(starts[j], starts[j] + sizes[j])
            Bg = B[sl]
            score = float(np.linalg.norm(Bg))
            wald = float(np.sum(Bg * (Vblocks[j] @ Bg)))
            q = sizes[j] * r
            if wald <= 0.0:
                pval = 1.0
            elif sigma2 <= 0.0:
                pval = 0.0
            else:
                pval = float(stats.f.sf(wald / q / sigma2, q, df2))
            raw.append((j, i, score, pval))
    rej = benjamini_hochberg([e[3] for e in raw], alpha)
    return [EdgeScore(j, i, s, bool(sig), p) for (j, i, s, p), sig in zip(raw, rej)]


# ----------------------------------------------------------------------------
# group lasso


def _residualize(C, M, C_fit=None):
    coef, *_ = np.linalg.lstsq(C, M, rcond=None)
    return M - C @ coef, coef


def _orthonormal_groups(Xs, n):
    """Per-group SVD basis scaled so that ``Q^T Q = n I``."""
    out = []
    for X in Xs:
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
        keep = s > 1e-10 * max(s.max(), 1e-300) if s.size else s > 0
        Q = U[:, keep] * np.sqrt(n)
        to_orig = Vt[keep].T * (np.sqrt(n) / s[keep])
        out.append((Q, to_orig))
    return out


def _group_lasso_fit(groups, Y, lam, tol=LASSO_TOL, max_iter=10000, init=None):
    """Block coordinate descent for ``1/(2n)||Y - sum Q_g T_g||^2 + lam sum sqrt(q_g)||T_g||``.

    ``groups`` are ``(Q, to_orig)`` pairs with ``Q^T Q = n I``; returns the
    coefficient blocks in orthonormal coordinates. ``init`` warm-starts the
    blocks (e.g. from the previous point on a lambda path).
    """
    n = Y.shape[0]
    sizes = [Q.shape[1] for Q, _ in groups]
    starts = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    if starts[-1] == 0:
        return [np.zeros((0, Y.shape[1])) for _ in groups]
    # Gram form: updates cost O(q) instead of O(n)
    Qall = np.hstack([Q for Q, _ in groups])
    M = Qall.T @ Qall / n
    theta = np.zeros((starts[-1], Y.shape[1]))
    if init is not None:
        theta = np.vstack(init) if len(init) else theta
    resid = Qall.T @ Y / n - M @ theta  # Q^T R / n
    for _ in range(max_iter):
        delta = 0.0
        for g in range(len(groups)):
            sl = slice(starts[g], starts[g + 1])
            if sizes[g] == 0:
                continue
            old = theta[sl]
            U = resid[sl] + old
            nu = math.sqrt(float((U * U).sum()))
            thr = lam * math.sqrt(sizes[g])
            new = (1.0 - thr / nu) * U if nu > thr else np.zeros_like(U)
            step = new - old
            d = float(np.abs(step).max())
            if d > 0.0:
                resid -= M[:, sl] @ step
                delta = max(delta, d)
                theta[sl] = new
        if delta < tol:
            break
    return [theta[starts[g]:starts[g + 1]].copy() for g in range(len(groups))]


def _node_problem(des, i, cand):
    """Controls (intercept + own lags) and candidate lag blocks for node ``i``."""
    Y = des.response(i)
    C = np.hstack([np.ones((des.n, 1)), des.blocks[i]])
    Xs = [des.blocks[j] for j in cand]
    return Y, C, Xs


def _fit_path(Y, C, Xs, lams):
    """Warm-started fits along a decreasing ``lams`` path.

    Returns a list of ``(coefs, norms, gamma)`` in the original coordinates.
    """
    Yr, _ = _residualize(C, Y)
    Xr = [_residualize(C, X)[0] for X in Xs]
    groups = _orthonormal_groups(Xr, Y.shape[0])
    out, thetas = [], None
    for lam in lams:
        thetas = _group_lasso_fit(groups, Yr, lam, init=thetas)
        coefs = [to @ th for (_, to), th in zip(groups, thetas)]
        norms = [float(np.linalg.norm(th)) for th in thetas]
        # unpenalized controls given the group fit
        fitted = sum((X @ b for X, b in zip(Xs, coefs)), np.zeros_like(Y))
        gamma, *_ = np.linalg.lstsq(C, Y - fitted, rcond=None)
        out.append((coefs, norms, gamma))
    return out


def _fit_node(Y, C, Xs, lam):
    return _fit_path(Y, C, Xs, [lam])[0]


def _lambda_max(Y, C, Xs):
    n = Y.shape[0]
    Yr, _ = _residualize(C, Y)
    best = 0.0
    for Q, _ in _orthonormal_groups([_residualize(C, X)[0] for X in Xs], n):
        if Q.shape[1]:
            best = max(best, np.linalg.norm(Q.T @ Yr) / n / np.sqrt(Q.shape[1]))
    return best


def _candidates_by_node(candidates, N, significant_only):
    cand = {i: [] for i in range(N)}
    for e in candidates:
        if e.significant or not significant_only:
            cand[e.dst].append(e.src)
    return {i: sorted(set(v)) for i, v in cand.items()}


def select_lambda(Y, C, Xs, n_folds=5, n_grid=15, ratio=1e-3, rule="1se"):
    """Forward-chaining cross-validated lambda for one node.

    Time is cut into ``n_folds + 1`` contiguous blocks; fold ``k`` trains on
    blocks ``0..k-1`` and validates on block ``k``. Each fold fits the whole
    grid along a warm-started path.

    Parameters
    ----------
    rule : {"1se", "min"}
        ``"min"`` picks the grid point with the smallest validation error;
        ``"1se"`` picks the largest lambda whose mean per-sample error is
        within one standard error (across folds) of that minimum.
    """
    if rule not in ("1se", "min"):
        raise ValueError(f"unknown rule {rule!r}")
    lmax = _lambda_max(Y, C, Xs)
    if lmax == 0.0:
        return 0.0
    grid = lmax * np.logspace(0.0, np.log10(ratio), n_grid)
    n = Y.shape[0]
    cuts = np.linspace(0, n, n_folds + 2).astype(int)
    err = np.zeros((n_folds, n_grid))
    for k in range(1, n_folds + 1):
        tr = slice(0, cuts[k])
        va = slice(cuts[k], cuts[k + 1])
        path = _fit_path(Y[tr], C[tr], [X[tr] for X in Xs], grid)
        for g, (coefs, _, gamma) in enumerate(path):
            pred = C[va] @ gamma + sum((X[va] @ b for X, b in zip(Xs, coefs)),
                                       np.zeros_like(Y[va]))
            err[k - 1, g] = float(np.mean((Y[va] - pred) ** 2))
    mean = err.mean(axis=0)
    best = int(np.argmin(mean))
    if rule == "min":
        return float(grid[best])
    se = err[:, best].std(ddof=1) / np.sqrt(n_folds) if n_folds > 1 else 0.0
    # grid is decreasing, so the first admissible index is the largest lambda
    return float(grid[int(np.flatnonzero(mean <= mean[best] + se)[0])])


_CV_RULES = {"cv": "1se", "cv-min": "min"}


def lasso_refine(latent_series, candidates, lam, s, lag=2, k=None,
                 significant_only=True):
    """Group-lasso refinement of candidate edges into sparse parent sets.

    Parameters
    ----------
    latent_series : ndarray of shape (T, N, D)
    candidates : list of EdgeScore
        Usually the output of :func:`var_init`; by default only the
        significant ones are offered to the lasso.
    lam : float, "cv" or "cv-min"
        Penalty level, or per-node forward-chaining cross-validation with
        the one-standard-error rule (``"cv"``) or the minimum-error rule
        (``"cv-min"``).
    s : int
        Maximum number of parents kept per node (largest group norms).

    Returns
    -------
    CandidateStructure
    """
    if len(candidates) == 0:
        raise ValueError("no candidate edges")
    if isinstance(lam, str) and lam not in _CV_RULES:
        raise ValueError(f"unknown lambda selection {lam!r}")
    if not isinstance(lam, str) and lam < 0:
        raise ValueError("lambda must be >= 0")
    des = _Design(latent_series, lag, k)
    cand = _candidates_by_node(candidates, des.N, significant_only)
    parents, strength = {}, {}
    for i in range(des.N):
        if not cand[i]:
            parents[i] = ()
            continue
        Y, C, Xs = _node_problem(des, i, cand[i])
        if isinstance(lam, str):
            lam_i = select_lambda(Y, C, Xs, rule=_CV_RULES[lam])
        else:
            lam_i = float(lam)
        _, norms, _ = _fit_node(Y, C, Xs, lam_i)
        order = np.argsort(norms, kind="stable")[::-1]
        keep = [cand[i][g] for g in order if norms[g] > 0][:s]
        parents[i] = tuple(sorted(keep))
        for g in order:
            if norms[g] > 0:
                strength[(cand[i][g], i)] = norms[g]
    return CandidateStructure(parents, int(s), strength)


def gate_scores(structure, edge_scores):
    """``gamma_ij = score_ij / max_{j' in Pa(i)} score_ij'`` for structure edges.

    Returns
    -------
    dict
        ``(src, dst) -> gamma`` with the strongest parent of each node at 1.
    """
    lookup = {(e.src, e.dst): e.score for e in edge_scores}
    gates = {}
    for i, pa in structure.parents.items():
        if not pa:
            continue
        sc = np.array([lookup[(j, i)] for j in pa], dtype=float)
        top = sc.max()
        for j, v in zip(pa, sc):
            gates[(j, i)] = float(v / top) if top > 0 else 1.0
    return gates


def gate_matrix(gates, n_nodes):
    """Dense ``(N, N)`` matrix with ``G[dst, src] = gamma``."""
    G = np.zeros((n_nodes, n_nodes))
    for (j, i), g in gates.items():
        G[i, j] = g
    return G


def rank_edges(edge_scores):
    """``(src, dst)`` pairs, significant edges first, each tier by decreasing score.

    Collinear lag blocks can inflate coefficient norms of edges that the
    group test rejects, so the test outcome takes precedence over the raw
    score. Ties are broken by node ids.
    """
    ordered = sorted(edge_scores, key=lambda e: (not e.significant, -e.score, e.src, e.dst))
    return [(e.src, e.dst) for e in ordered]


def marginal_correlation_ranking(latent_series, lag=1):
    """Baseline ranking by lagged marginal cross-correlation.

    ``score(j -> i)`` is the Frobenius norm of the correlation matrix
    between the coordinates of ``j`` at ``t - lag`` and of ``i`` at ``t``,
    with no adjustment for other nodes.
    """
    Z = _as_series(latent_series)
    T, N, D = Z.shape
    A = Z[:-lag] - Z[:-lag].mean(axis=0)
    B = Z[lag:] - Z[lag:].mean(axis=0)
    sa = A.std(axis=0)
    sb = B.std(axis=0)
    sa[sa == 0] = np.inf
    sb[sb == 0] = np.inf
    A = A / sa
    B = B / sb
    scores = []
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            C = A[:, j, :].T @ B[:, i, :] / (T - lag)
            scores.append(EdgeScore(j, i, float(np.linalg.norm(C)), False))
    return rank_edges(scores)


def write_edges(path, edges):
    """Write ``src,dst,score,significant`` CSV with a header line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src,dst,score,significant\n")
        for e in edges:
            fh.write(f"{e.src},{e.dst},{e.score!r},{int(bool(e.significant))}\n")


def read_edges(path):
    """Inverse of :func:`write_edges`."""
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "src,dst,score,significant":
            raise ValueError(f"unexpected edge-list header: {header!r}")
        for line in fh:
            if not line.strip():
                continue
            src, dst, score, sig = line.strip().split(",")
            out.append(EdgeScore(int(src), int(dst), float(score), sig in ("1", "True", "true")))
    return out
