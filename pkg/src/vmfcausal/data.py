"""
Synthetic temporal hypergraphs with known causal structure, and dataset IO.

The generator simulates a ground-truth :class:`~vmfcausal.scm.ScmModel`:

* a fraction of *root* nodes has no parents and is driven by large AR(1)
  drivers; every other node has 1..s lagged parents, a small driver and
  concentrated vMF noise;
* observed features are ``x = [c, A h + noise]`` where ``c`` is a
  persistent per-node context (AR(1), unit variance) that is independent
  of the latents;
* targets are ``y = w^T h + eta`` with ``Var(eta | x) = sigma^2(x)``,
  by default ``0.1 + c^2``; the noise is independent of the angular
  dispersion of the latents;
* hyperedges at each step are angular nearest-neighbour groups of 3-5
  nodes.

Files written by :func:`write_dataset` (UTF-8, one header line each):
``records.csv`` (``t,node,f0..f{d-1},target``), ``hyperedges.csv``
(``t,members`` with space-separated ids), ``meta.csv`` (``key,value``)
and, when ground truth is known, ``truth_edges.csv``
(``src,dst,score,significant``) and ``latents.csv`` (``t,node,h0..``).
"""

import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import scm
from .structure import EdgeScore, read_edges, write_edges

__all__ = [
    "SyntheticSpec",
    "TemporalHypergraph",
    "GroundTruth",
    "gen_synthetic",
    "angular_hyperedges",
    "write_dataset",
    "read_dataset",
]

SCHEMA_VERSION = 1


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic generator (see module docstring)."""

    n_nodes: int = 30
    timesteps: int = 200
    dim: int = 8
    n_features: int = 8
    sparsity: int = 2
    coupling: float = 1.0
    noise_kappa: float = 500.0
    root_fraction: float = 0.2
    root_rho: float = 0.8
    root_scale: float = 2.0
    driver_scale: float = 0.05
    exo_strength: float = 0.5
    feature_noise: float = 0.1
    context_rho: float = 0.95
    aleatoric: str = "heteroscedastic"
    aleatoric_const: float = 0.1
    target_scale: float = 2.0
    hyperedges_per_step: int = None
    task: str = "regression"
    separable: bool = False
    horizon: int = 0
    burn_in: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 3:
            raise ValueError("need at least 3 nodes")
        if self.timesteps < 2 + self.horizon:
            raise ValueError("timesteps too small for the horizon")
        if self.dim < 2 or self.n_features < 2:
            raise ValueError("dim and n_features must be >= 2")
        if not 1 <= self.sparsity < self.n_nodes:
            raise ValueError("sparsity must be in [1, N-1]")
        if not 0.0 < self.root_fraction < 1.0:
            raise ValueError("root_fraction must be in (0, 1)")
        if self.coupling < 0 or self.noise_kappa <= 0:
            raise ValueError("coupling must be >= 0 and noise_kappa > 0")
        if self.aleatoric not in ("heteroscedastic", "constant"):
            raise ValueError(f"unknown aleatoric law {self.aleatoric!r}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    def sigma2(self, context):
        """True aleatoric variance as a function of the context feature."""
        c = np.asarray(context, dtype=float)
        if self.aleatoric == "constant":
            return np.full_like(c, self.aleatoric_const)
        return 0.1 + c * c


@dataclass
class TemporalHypergraph:
    """Node features, hyperedges and targets over ``T`` steps.

    ``targets[t, i]`` is the label of node ``i`` at time ``t + horizon``.
    """

    features: np.ndarray
    targets: np.ndarray
    hyperedges: list
    task: str = "regression"
    n_classes: int = 0
    horizon: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 3:
            raise ValueError("features must have shape (T, N, d)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        T, N, _ = self.features.shape
        self.targets = np.asarray(self.targets, dtype=float).reshape(T, N)
        if len(self.hyperedges) != T:
            raise ValueError("need one hyperedge list per time step")
        clean = []
        for el in self.hyperedges:
            row = []
            for e in el:
                e = np.asarray(e, dtype=np.int64)
                if e.size < 2 or np.unique(e).size != e.size:
                    raise ValueError("hyperedges need >= 2 distinct members")
                if e.min() < 0 or e.max() >= N:
                    raise ValueError("hyperedge member out of range")
                row.append(e)
            clean.append(row)
        self.hyperedges = clean

    @property
    def n_nodes(self):
        return self.features.shape[1]

    @property
    def timesteps(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[2]


@dataclass
class GroundTruth:
    model: scm.ScmModel
    latents: np.ndarray
    drivers: np.ndarray
    edges: list
    roots: np.ndarray
    snr: np.ndarray
    target_w: np.ndarray
    sigma2: np.ndarray
    mean_target: np.ndarray


def _random_orthogonal(D, rng):
    Q, R = np.linalg.qr(rng.standard_normal((D, D)))
    return Q * np.sign(np.diag(R))


def _ar1(rng, shape, rho):
    T = shape[0]
    out = np.empty(shape)
    out[0] = rng.standard_normal(shape[1:])
    innov = np.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        out[t] = rho * out[t - 1] + innov * rng.standard_normal(shape[1:])
    return out


def angular_hyperedges(H, n_groups, rng, sizes=(3, 5)):
    """Groups of nearest neighbours by cosine around random seed nodes."""
    N = H.shape[0]
    cos = H @ H.T
    out = []
    for _ in range(n_groups):
        i = int(rng.integers(N))
        k = int(rng.integers(sizes[0], sizes[1] + 1))
        order = np.argsort(-cos[i], kind="stable")
        members = [i] + [int(j) for j in order if j != i][:k - 1]
        out.append(np.array(sorted(members), dtype=np.int64))
    return out


def gen_synthetic(spec):
    """Simulate a dataset and its ground truth.

    Returns
    -------
    data : TemporalHypergraph
    truth : GroundTruth
    """
    rng = np.random.default_rng(spec.seed)
    N, D, d, s = spec.n_nodes, spec.dim, spec.n_features, spec.sparsity
    n_roots = max(1, int(round(spec.root_fraction * N)))
    roots = np.sort(rng.choice(N, n_roots, replace=False))
    is_root = np.zeros(N, dtype=bool)
    is_root[roots] = True
    parents = []
    beta = np.zeros((N, N))
    for i in range(N):
        if is_root[i]:
            parents.append(())
            continue
        k = int(rng.integers(1, s + 1))
        pa = tuple(sorted(int(j) for j in rng.choice(np.delete(np.arange(N), i), k,
                                                       replace=False)))
        parents.append(pa)
        beta[i, list(pa)] = spec.coupling * rng.uniform(0.7, 1.3, size=k)
    gates = (beta != 0).astype(float)
    W_c = _random_orthogonal(D, rng)
    exo = rng.standard_normal((N, D))
    exo /= np.linalg.norm(exo, axis=1, keepdims=True)
    fw = np.where(is_root, spec.root_scale, spec.driver_scale)
    model = scm.ScmModel(parents, gates, beta, W_c, exo, np.full(N, spec.exo_strength),
                         spec.noise_kappa, W_x=np.eye(D), feat_weight=fw, sparsity_s=s)

    T_all = spec.timesteps + spec.burn_in
    drivers = _ar1(rng, (T_all, N, D), spec.root_rho)
    init = rng.standard_normal((N, D))
    init /= np.linalg.norm(init, axis=1, keepdims=True)
    sim_seed = int(rng.integers(2 ** 63))
    H_all = scm.simulate(model, init, drivers, rng_seed=sim_seed)
    H = H_all[spec.burn_in:]
    drv = drivers[spec.burn_in:]
    T = spec.timesteps

    # signal-to-noise of the parent term per non-root node
    prev = H_all[spec.burn_in - 1:-1]
    sig = np.einsum("ij,tjd->tid", model.weights, prev @ W_c.T)
    m = sig + fw[:, None] * drv + spec.exo_strength * exo
    mu = m / np.linalg.norm(m, axis=-1, keepdims=True)
    dev = np.sum((H - mu) ** 2, axis=-1).mean(axis=0)
    drv_e = (fw[:, None] ** 2 * np.sum(drv ** 2, axis=-1).T).mean(axis=1)
    snr = np.where(is_root, np.nan, np.sum(sig ** 2, axis=-1).mean(axis=0) / (dev + drv_e))

    context = _ar1(rng, (T, N), spec.context_rho)
    A = rng.standard_normal((d - 1, D)) / np.sqrt(D)
    X = np.empty((T, N, d))
    X[:, :, 0] = context
    X[:, :, 1:] = H @ A.T + spec.feature_noise * rng.standard_normal((T, N, d - 1))

    w_y = rng.standard_normal(D)
    w_y *= spec.target_scale / np.linalg.norm(w_y)
    Teff = T - spec.horizon
    mean_y = H[spec.horizon:] @ w_y
    s2 = spec.sigma2(context[:Teff])
    eta = np.sqrt(s2) * rng.standard_normal((Teff, N))
    if spec.task == "regression":
        y = mean_y + eta
        n_classes = 0
    elif spec.separable:
        v = rng.standard_normal(d - 1)
        y = (X[spec.horizon:, :, 1:] @ v > 0).astype(float)
        n_classes = 2
    else:
        y = (mean_y + eta > 0).astype(float)
        n_classes = 2

    n_groups = spec.hyperedges_per_step or max(1, N // 3)
    edges_t = [angular_hyperedges(H[t], n_groups, rng) for t in range(Teff)]
    data = TemporalHypergraph(X[:Teff], y, edges_t, spec.task, n_classes, spec.horizon)
    data.meta = dict(schema_version=SCHEMA_VERSION, **{k: v for k, v in asdict(spec).items()})
    data.meta["snr_min"] = float(np.nanmin(snr))
    truth_edges = [EdgeScore(j, i, float(abs(model.weights[i, j])), True)
                   for i in range(N) for j in parents[i]]
    truth = GroundTruth(model, H, drv, truth_edges, roots, snr, w_y, s2, mean_y)
    return data, truth


# ----------------------------------------------------------------------------
# serialization


def _fmt(x):
    return repr(float(x))


def write_dataset(out_dir, data, truth=None):
    """Write a dataset (and optional ground truth) as delimited text files."""
    os.makedirs(out_dir, exist_ok=True)
    T, N, d = data.features.shape
    with open(os.path.join(out_dir, "records.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,node," + ",".join(f"f{k}" for k in range(d)) + ",target\n")
        for t in range(T):
            for i in range(N):
                vals = ",".join(_fmt(v) for v in data.features[t, i])
                fh.write(f"{t},{i},{vals},{_fmt(data.targets[t, i])}\n")
    with open(os.path.join(out_dir, "hyperedges.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,members\n")
        for t, el in enumerate(data.hyperedges):
            for e in el:
                fh.write(f"{t}," + " ".join(str(int(j)) for j in e) + "\n")
    meta = dict(data.meta)
    meta.update(n_nodes=N, timesteps=T, n_features=d, task=data.task,
                n_classes=data.n_classes, horizon=data.horizon,
                schema_version=SCHEMA_VERSION)
    with open(os.path.join(out_dir, "meta.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("key,value\n")
        for k in sorted(meta):
            fh.write(f"{k},{meta[k]}\n")
    if truth is not None:
        write_edges(os.path.join(out_dir, "truth_edges.csv"), truth.edges)
        H = truth.latents[:T]
        D = H.shape[2]
        with open(os.path.join(out_dir, "latents.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t,node," + ",".join(f"h{k}" for k in range(D)) + "\n")
            for t in range(T):
                for i in range(N):
                    fh.write(f"{t},{i}," + ",".join(_fmt(v) for v in H[t, i]) + "\n")


def _read_table(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return header, rows


def _parse_meta_value(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    if v in ("True", "False"):
        return v == "True"
    if v == "None":
        return None
    return v


def read_dataset(data_dir):
    """Read files written by :func:`write_dataset`.

    Returns
    -------
    data : TemporalHypergraph
    extras : dict
        ``truth_edges`` (list of EdgeScore) and ``latents`` (ndarray) when
        present.
    """
    header, rows = _read_table(os.path.join(data_dir, "meta.csv"))
    if header != ["key", "value"]:
        raise ValueError("bad meta.csv header")
    meta = {r[0]: _parse_meta_value(",".join(r[1:])) for r in rows}
    header, rows = _read_table(os.path.join(data_dir, "records.csv"))
    d = len(header) - 3
    if header[:2] != ["t", "node"] or header[-1] != "target" or d < 1:
        raise ValueError("bad records.csv header")
    arr = np.array(rows, dtype=float)
    T = int(arr[:, 0].max()) + 1
    N = int(arr[:, 1].max()) + 1
    if arr.shape[0] != T * N:
        raise ValueError("records do not cover every (t, node)")
    X = np.empty((T, N, d))
    y = np.empty((T, N))
    ti = arr[:, 0].astype(int)
    ni = arr[:, 1].astype(int)
    X[ti, ni] = arr[:, 2:2 + d]
    y[ti, ni] = arr[:, -1]
    header, rows = _read_table(os.path.join(data_dir, "hyperedges.csv"))
    if header != ["t", "members"]:
        raise ValueError("bad hyperedges.csv header")
    edges = [[] for _ in range(T)]
    for t, members in rows:
        edges[int(t)].append(np.array([int(m) for m in members.split()], dtype=np.int64))
    data = TemporalHypergraph(X, y, edges, str(meta.get("task", "regression")),
                              int(meta.get("n_classes", 0)), int(meta.get("horizon", 0)), meta)
    extras = {}
    p = os.path.join(data_dir, "truth_edges.csv")
    if os.path.exists(p):
        extras["truth_edges"] = read_edges(p)
    p = os.path.join(data_dir, "latents.csv")
    if os.path.exists(p):
        header, rows = _read_table(p)
        a = np.array(rows, dtype=float)
        L = np.empty((T, N, len(header) - 2))
        L[a[:, 0].astype(int), a[:, 1].astype(int)] = a[:, 2:]
        extras["latents"] = L
    return data, extras


def spec_fields():
    return [f.name for f in fields(SyntheticSpec)]
