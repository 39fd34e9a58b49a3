"""
Spherical hypergraph predictor with uncertainty heads and analytic gradients.

One forward pass over a batch of time slices ``t``:

1. ``h0 = normalize(W x_t + b)`` and ``hp = normalize(W x_{t-1} + b)``;
2. ``kappa = rho(h0)`` and ``U_epi = H_sph(kappa)``;
3. ``L`` message-passing layers over the slice hyperedges, each adding the
   lagged causal term ``sum_j G_ij W_c hp_j`` with ``G = mask * gamma * beta``;
4. linear readout (regression value or class logits);
5. ``U_alea = sigma^2_phi(x_t)`` and ``U_total = g_omega(U_epi, U_alea)``.

The composite objective is ``L_pred + lambda1 L_entropy + lambda2 L_causal``
where ``L_causal`` is the gate-weighted L1 norm of the structural weights
``beta`` plus squared violations of optional edge constraints. Every
gradient is written out by hand and checked by finite differences in
:func:`vmfcausal.training.grad_check`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import sphere, vmf
from .sphere import Incidence
from .uncertainty import (
    ALEATORIC_HIDDEN,
    FUSION_HIDDEN,
    aleatoric_backward,
    aleatoric_forward,
    fuse_backward,
    fuse_forward,
)

__all__ = [
    "ModelSpec",
    "HypergraphModel",
    "Batch",
    "LossWeights",
    "make_batch",
    "forward",
    "loss_and_grad",
    "predict",
    "sq_residuals",
    "causal_penalty",
]

FUSION_KEYS = {"fc": "c", "fs1": "s1", "fs2": "s2", "fW1": "W1", "fb1": "b1",
               "fW2": "W2", "fb2": "b2", "fv": "v"}
ALEA_KEYS = ("A1", "a1", "a2", "a2b")


@dataclass
class LossWeights:
    """``lambda1`` (entropy calibration) and ``lambda2`` (causal penalty)."""

    lambda1: float = 0.1
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")

    def combine(self, pred, entropy, causal):
        """``pred + lambda1 * entropy + lambda2 * causal``."""
        return pred + self.lambda1 * entropy + self.lambda2 * causal


@dataclass
class ModelSpec:
    """Static shape of a :class:`HypergraphModel`."""

    n_nodes: int
    n_features: int
    dim: int = 16
    mp_layers: int = 3
    task: str = "regression"
    n_classes: int = 0
    gate_mode: str = "frozen"

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")
        if self.gate_mode not in ("frozen", "learned"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")
        if self.mp_layers < 0 or self.dim < 2:
            raise ValueError("need mp_layers >= 0 and dim >= 2")

    @property
    def n_out(self):
        return 1 if self.task == "regression" else self.n_classes


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


class HypergraphModel:
    """Parameters plus the current causal structure (mask and gates).

    Parameters are a flat ``dict`` of float arrays so the optimizer,
    the gradient check and checkpoints can treat them uniformly.
    """

    def __init__(self, spec, params, mask=None, gamma=None, constraints=None):
        self.spec = spec
        self.params = params
        N = spec.n_nodes
        self.mask = np.zeros((N, N), dtype=bool) if mask is None else np.asarray(mask, bool)
        self.gamma = np.zeros((N, N)) if gamma is None else np.asarray(gamma, float)
        # {(src, dst): target effective weight}
        self.constraints = dict(constraints or {})

    @classmethod
    def init(cls, spec, rng=None):
        """Random initialization.

        The fusion offset starts at ``-H_sph(D, kappa_0)`` where ``kappa_0``
        is the concentration of a zero head, so the untrained fused value
        sits near the aleatoric output instead of tens of nats away. The
        nonlinear fusion branch starts small but nonzero: with squared
        weights an all-zero branch is a stationary point.
        """
        rng = np.random.default_rng(rng)
        N, d, D = spec.n_nodes, spec.n_features, spec.dim
        p = {
            "W": rng.normal(scale=1.0 / np.sqrt(d), size=(D, d)),
            "b": np.zeros(D),
            "kw": np.zeros(D),
            "kb": np.array(0.0),
            "Rw": rng.normal(scale=1.0 / np.sqrt(D), size=(spec.n_out, D)),
            "Rb": np.zeros(spec.n_out),
            "A1": rng.normal(scale=np.sqrt(2.0 / (d + ALEATORIC_HIDDEN)),
                             size=(ALEATORIC_HIDDEN, d)),
            "a1": np.zeros(ALEATORIC_HIDDEN),
            "a2": np.zeros(ALEATORIC_HIDDEN),
            "a2b": np.array(0.0),
        }
        for l in range(spec.mp_layers):
            p[f"lka{l}"] = np.array(0.0)
            p[f"Wc{l}"] = np.eye(D)
            p[f"beta{l}"] = np.ones((N, N))
        if spec.gate_mode == "learned":
            p["graw"] = np.zeros((N, N))
        k0 = sphere.concentration(np.zeros(D), 0.0, np.zeros(D))
        h = FUSION_HIDDEN
        p.update({
            "fc": np.array(-float(vmf.entropy(D, k0))),
            "fs1": np.array(1.0),
            "fs2": np.array(1.0),
            "fW1": rng.normal(scale=0.1, size=(h, 2)),
            "fb1": np.zeros(h),
            "fW2": rng.normal(scale=0.1 / np.sqrt(h), size=(h, h)),
            "fb2": np.zeros(h),
            "fv": np.full(h, 0.1),
        })
        return cls(spec, p)

    def copy(self):
        return HypergraphModel(self.spec, {k: v.copy() for k, v in self.params.items()},
                               self.mask.copy(), self.gamma.copy(), self.constraints)

    # -- structure ------------------------------------------------------------

    def set_structure(self, parents, gates):
        """Install a parent map and gate values ``{(src, dst): gamma}``."""
        N = self.spec.n_nodes
        self.mask = np.zeros((N, N), dtype=bool)
        self.gamma = np.zeros((N, N))
        for i, pa in parents.items():
            for j in pa:
                self.mask[i, j] = True
                self.gamma[i, j] = gates.get((j, i), 1.0)

    def gate_values(self):
        """Effective ``gamma`` on the mask (learned gates are sigmoids)."""
        if self.spec.gate_mode == "learned":
            return self.mask * _sigmoid(self.params["graw"])
        return self.mask * self.gamma

    def effective_weights(self, layer):
        """``G = mask * gamma * beta`` for one layer, ``G[dst, src]``."""
        return self.gate_values() * self.params[f"beta{layer}"]

    @property
    def has_structure(self):
        return bool(self.mask.any())

    # -- inference helpers -------------------------------------------------------

    def encode(self, X):
        """``h0`` for every row of features ``X`` of shape ``(..., d)``."""
        X = np.asarray(X, dtype=float)
        h = sphere.project_normalize(self.params["W"], self.params["b"],
                                     X.reshape(-1, X.shape[-1]))
        return h.reshape(X.shape[:-1] + (self.spec.dim,))

    def fusion_params(self):
        return {v: self.params[k] for k, v in FUSION_KEYS.items()}


@dataclass
class Batch:
    """Stacked time slices.

    ``x``/``xprev`` have shape ``(B, N, d)``; ``y`` and ``u_emp`` have shape
    ``(B, N)``; ``inc`` covers the ``B*N`` stacked rows.
    """

    x: np.ndarray
    xprev: np.ndarray
    y: np.ndarray
    inc: Incidence
    u_emp: np.ndarray = None
    times: np.ndarray = field(default=None)

    @property
    def n_items(self):
        return self.y.size


def make_batch(data, times, u_emp=None):
    """Batch for slices ``times`` (each ``>= 1``) of a :class:`TemporalHypergraph`.

    ``u_emp`` is indexed by absolute time, shape ``(T, N)``.
    """
    times = np.asarray(times, dtype=int)
    if times.size == 0:
        raise ValueError("empty batch")
    if times.min() < 1:
        raise ValueError("slices need a previous time step")
    inc = Incidence.from_slices([data.hyperedges[t] for t in times], data.n_nodes)
    ue = None if u_emp is None else np.asarray(u_emp)[times]
    return Batch(data.features[times], data.features[times - 1], data.targets[times],
                 inc, ue, times)


def forward(model, batch, drop=None):
    """Forward pass; returns ``(out, cache)``.

    ``out`` holds ``pred`` (regression values or class probabilities),
    ``kappa``, ``u_epi``, ``u_alea`` and ``u_total`` for the ``B*N`` items.
    ``drop`` is an optional pair of multiplicative feature masks (dropout).
    """
    p, spec = model.params, model.spec
    B, N, d = batch.x.shape
    D = spec.dim
    x = batch.x.reshape(B * N, d)
    xp = batch.xprev.reshape(B * N, d)
    if drop is None:
        xd, xpd = x, xp
    else:
        xd = x * np.reshape(drop[0], x.shape)
        xpd = xp * np.reshape(drop[1], xp.shape)
    h0, n0 = sphere._normalize_rows(xd @ p["W"].T + p["b"], sphere.EPS_NORM,
                                    sphere.DegenerateProjectionError)
    hp, npn = sphere._normalize_rows(xpd @ p["W"].T + p["b"], sphere.EPS_NORM,
                                     sphere.DegenerateProjectionError)
    kappa = sphere.concentration(p["kw"], float(p["kb"]), h0)
    u_epi = vmf.entropy(D, kappa)
    H = h0
    mp_caches = []
    use_g = model.has_structure
    for l in range(spec.mp_layers):
        G = model.effective_weights(l) if use_g else None
        Wc = p[f"Wc{l}"] if use_g else None
        H, c = sphere.message_passing_forward(H, batch.inc, float(p[f"lka{l}"]), Wc, G,
                                              HP=hp if use_g else None)
        mp_caches.append(c)
    logits = H @ p["Rw"].T + p["Rb"]
    u_alea, acache = aleatoric_forward(p["A1"], p["a1"], p["a2"], float(p["a2b"]), x)
    u_total, fcache = fuse_forward(model.fusion_params(), u_epi, u_alea)
    if spec.task == "regression":
        pred = logits[:, 0]
    else:
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        pred = e / e.sum(axis=1, keepdims=True)
    out = dict(pred=pred, kappa=kappa, u_epi=u_epi, u_alea=u_alea, u_total=u_total,
               states=H)
    cache = dict(x=x, xd=xd, xpd=xpd, h0=h0, n0=n0, hp=hp, npn=npn, H=H,
                 logits=logits, mp=mp_caches, acache=acache, fcache=fcache)
    return out, cache


def sq_residuals(model, out, y):
    """Per-item squared residual used by the empirical uncertainty proxy.

    Regression: ``(y_hat - y)^2``. Classification: ``(1 - p_y)^2``.
    """
    y = np.ravel(y)
    if model.spec.task == "regression":
        return (out["pred"] - y) ** 2
    py = out["pred"][np.arange(y.size), y.astype(int)]
    return (1.0 - py) ** 2


def causal_penalty(model):
    """``sum_l sum gamma |beta_l|`` on the mask plus constraint violations."""
    if not model.has_structure and not model.constraints:
        return 0.0
    gam = model.gate_values()
    total = 0.0
    for l in range(model.spec.mp_layers):
        beta = model.params[f"beta{l}"]
        total += float(np.sum(gam * np.abs(beta)))
        G = gam * beta
        for (j, i), v in model.constraints.items():
            total += float((G[i, j] - v) ** 2)
    return total


def loss_and_grad(model, batch, weights, drop=None, need_grad=True):
    """Composite loss and its gradient with respect to every parameter.

    Returns
    -------
    total : float
    parts : dict with ``pred``, ``entropy``, ``causal``
    grads : dict keyed like ``model.params`` (``None`` if not requested)
    out : dict from :func:`forward`
    """
    p, spec = model.params, model.spec
    out, cache = forward(model, batch, drop)
    n = batch.n_items
    y = batch.y.ravel()
    if spec.task == "regression":
        r = out["pred"] - y
        l_pred = float(np.mean(r * r))
    else:
        logits = cache["logits"]
        m = logits.max(axis=1)
        lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
        yi = y.astype(int)
        l_pred = float(np.mean(lse - logits[np.arange(n), yi]))
    if batch.u_emp is not None and weights.lambda1 > 0:
        gap = out["u_total"] - batch.u_emp.ravel()
        l_ent = float(np.mean(gap * gap))
    else:
        gap = None
        l_ent = 0.0
    l_caus = causal_penalty(model) if weights.lambda2 > 0 else 0.0
    total = weights.combine(l_pred, l_ent, l_caus)
    parts = dict(pred=l_pred, entropy=l_ent, causal=l_caus)
    if not need_grad:
        return total, parts, None, out

    g = {k: np.zeros_like(v) for k, v in p.items()}
    # readout
    if spec.task == "regression":
        dlog = (2.0 / n * r)[:, None]
    else:
        dlog = out["pred"].copy()
        dlog[np.arange(n), yi] -= 1.0
        dlog /= n
    g["Rw"] = dlog.T @ cache["H"]
    g["Rb"] = dlog.sum(axis=0)
    dH = dlog @ p["Rw"]
    # fusion and aleatoric head
    du_epi = np.zeros(n)
    if gap is not None:
        dg = weights.lambda1 * 2.0 / n * gap
        fgr, du_epi, du_alea = fuse_backward(dg, model.fusion_params(), cache["fcache"])
        for k, v in FUSION_KEYS.items():
            g[k] = np.asarray(fgr[v], dtype=float).reshape(p[k].shape)
        dA1, da1, da2, da2b = aleatoric_backward(du_alea, p["A1"], p["a2"], cache["acache"])
        g["A1"], g["a1"], g["a2"], g["a2b"] = dA1, da1, da2, np.array(da2b)
    # message passing, last layer first
    use_g = model.has_structure
    dhp = np.zeros_like(cache["hp"])
    dgam = np.zeros((spec.n_nodes, spec.n_nodes))
    gam = model.gate_values() if use_g else None
    for l in reversed(range(spec.mp_layers)):
        res = sphere.message_passing_backward(dH, cache["mp"][l])
        dH = res["H"]
        g[f"lka{l}"] = np.array(res["log_kappa_a"])
        if use_g:
            g[f"Wc{l}"] = res["W_c"]
            dG = res["G"]
            g[f"beta{l}"] = dG * gam
            dgam += dG * p[f"beta{l}"]
            dhp += res["HP"]
    # causal penalty
    if weights.lambda2 > 0 and (use_g or model.constraints):
        gam = model.gate_values()
        for l in range(spec.mp_layers):
            beta = p[f"beta{l}"]
            g[f"beta{l}"] += weights.lambda2 * gam * np.sign(beta)
            dgam += weights.lambda2 * model.mask * np.abs(beta)
            G = gam * beta
            for (j, i), v in model.constraints.items():
                dviol = weights.lambda2 * 2.0 * (G[i, j] - v)
                g[f"beta{l}"][i, j] += dviol * gam[i, j]
                dgam[i, j] += dviol * beta[i, j]
    if spec.gate_mode == "learned":
        s = _sigmoid(p["graw"])
        g["graw"] = dgam * model.mask * s * (1.0 - s)
    # concentration head feeds U_epi
    dkappa = du_epi * vmf.entropy_derivative(spec.dim, out["kappa"])
    dkw, dkb, dh_k = sphere.concentration_backward(dkappa, p["kw"], float(p["kb"]), cache["h0"])
    g["kw"], g["kb"] = dkw, np.array(dkb)
    dh0 = dH + dh_k
    dW, db = sphere.project_normalize_backward(dh0, cache["xd"], cache["h0"], cache["n0"])
    if use_g and spec.mp_layers:
        dW2, db2 = sphere.project_normalize_backward(dhp, cache["xpd"], cache["hp"], cache["npn"])
        dW, db = dW + dW2, db + db2
    g["W"], g["b"] = dW, db
    return total, parts, g, out


def predict(model, data, times, chunk=64):
    """Evaluation-mode forward over ``times``; arrays of shape ``(len(times), N, ...)``."""
    times = np.asarray(times, dtype=int)
    keys = ("pred", "kappa", "u_epi", "u_alea", "u_total", "states")
    parts = {k: [] for k in keys}
    N = model.spec.n_nodes
    for s in range(0, times.size, chunk):
        out, _ = forward(model, make_batch(data, times[s:s + chunk]))
        B = min(chunk, times.size - s)
        for k in keys:
            v = np.asarray(out[k])
            parts[k].append(v.reshape((B, N) + v.shape[1:]))
    return {k: np.concatenate(v) for k, v in parts.items()}
