"""
Training loop, gradient check, block-coordinate mode and checkpoints.

Each epoch ``e`` draws its randomness (shuffling, dropout) from
``SeedSequence([seed, e])``, so a run resumed from a checkpoint written
after epoch ``e`` continues exactly as the uninterrupted run would.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import structure as st
from .exceptions import ConfigError, TrainingDivergedError
from .model import (
    FUSION_KEYS,
    HypergraphModel,
    LossWeights,
    ModelSpec,
    forward,
    loss_and_grad,
    make_batch,
    predict,
    sq_residuals,
)
from .uncertainty import (
    aleatoric_forward,
    fit_aleatoric,
    fit_fusion,
    fit_linear_fusion,
    windowed_proxy,
)

__all__ = [
    "TrainConfig",
    "LossWeights",
    "AdamW",
    "TrainState",
    "composite_loss",
    "train",
    "grad_check",
    "block_coordinate_train",
    "save_checkpoint",
    "load_checkpoint",
    "write_trace",
    "split_times",
    "init_state",
    "refresh_structure",
    "empirical_targets",
    "refit_heads",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
# decoupled weight decay hits weight matrices only; biases, temperatures,
# structural weights (already L1-penalized) and the fusion head are exempt
_DECAY = ("W", "kw", "Rw", "A1")


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the reference configuration.

    ``batch`` counts items (node-time pairs); a batch holds
    ``max(1, batch // N)`` whole time slices.
    """

    lr: float = 5e-4
    batch: int = 256
    epochs: int = 50
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.3
    mp_layers: int = 3
    d_sphere: int = 16
    mc_samples: int = 100
    structure_epochs: int = 20
    sparsity: int = 2
    structure_alpha: float = 0.01
    # learned latents carry exogenous noise; the 1-SE rule prunes everything there
    structure_lam: object = "cv-min"
    gate_mode: str = "frozen"
    window: int = 10
    val_fraction: float = 0.2
    refit_heads: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.batch <= 0 or self.epochs < 0:
            raise ConfigError("lr and batch must be positive, epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.gate_mode not in ("frozen", "learned"):
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")


class AdamW:
    """Adam with decoupled weight decay over a dict of arrays."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    @staticmethod
    def decays(name):
        return name in _DECAY or name.startswith("Wc")

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and self.decays(k):
                upd = upd + self.lr * self.weight_decay * params[k]
            params[k] = np.asarray(params[k] - upd)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    model: HypergraphModel
    optimizer: AdamW
    epoch: int = 0
    seed: int = 0
    trace: list = field(default_factory=list)


def split_times(T, val_fraction):
    """``(train_times, val_times)``; both start at index >= 1."""
    n_val = int(round(val_fraction * T))
    n_tr = T - n_val
    if n_tr < 3:
        raise ValueError("too few training time steps")
    return np.arange(1, n_tr), np.arange(max(n_tr, 1), T)


def composite_loss(model, batch, weights):
    """``(total, parts)`` with ``total = pred + lambda1 entropy + lambda2 causal``."""
    total, parts, _, _ = loss_and_grad(model, batch, weights, need_grad=False)
    return total, parts


def empirical_targets(model, data, times, window):
    """Held-out proxy ``U_emp`` of shape ``(T, N)`` (NaN outside ``times``)."""
    out = predict(model, data, times)
    r2 = sq_residuals(model, {"pred": out["pred"].reshape((-1,) + out["pred"].shape[2:])},
                      data.targets[times])
    r2 = r2.reshape(times.size, data.n_nodes)
    U = np.full((data.timesteps, data.n_nodes), np.nan)
    U[times] = windowed_proxy(r2, window)
    return U


def refresh_structure(model, data, times, config):
    """Re-estimate parents and gates from the current encoder latents.

    Returns the candidate :class:`~vmfcausal.structure.EdgeScore` list, or
    ``None`` when the series is too short for the lagged design.
    """
    H = model.encode(data.features[: times[-1] + 1])
    try:
        edges = st.var_init(H, lag=2, alpha=config.structure_alpha)
    except ValueError as exc:
        log.warning("structure refresh skipped: %s", exc)
        return None
    if not any(e.significant for e in edges):
        model.set_structure({i: () for i in range(data.n_nodes)}, {})
        return edges
    cs = st.lasso_refine(H, edges, config.structure_lam, config.sparsity)
    model.set_structure(cs.parents, st.gate_scores(cs, edges))
    return edges


def _dropout_mask(rng, shape, keep):
    """Inverted-dropout mask; rows that would lose every feature are kept whole.

    A fully dropped row projects to the bias alone, which is zero at
    initialization and cannot be normalized.
    """
    m = rng.random(shape) < keep
    m[~m.any(axis=-1)] = True
    return m / keep


def _param_norms(params):
    return {k: float(np.linalg.norm(v)) for k, v in sorted(params.items())}


def init_state(config, data, seed):
    spec = ModelSpec(data.n_nodes, data.n_features, config.d_sphere, config.mp_layers,
                     data.task, data.n_classes, config.gate_mode)
    model = HypergraphModel.init(spec, np.random.SeedSequence([seed, 2 ** 31 - 1]))
    opt = AdamW(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    return TrainState(model, opt, 0, seed, [])


def train(config, data, weights=None, rng_seed=0, state=None, callback=None):
    """Minimize the composite objective with minibatch AdamW.

    Per epoch: optionally refresh the causal structure (every
    ``structure_epochs`` epochs, starting with the first), recompute the
    empirical proxy from full-data residuals and hold it fixed, then run
    one shuffled pass over the training slices.

    Parameters
    ----------
    config : TrainConfig
    data : TemporalHypergraph
    weights : LossWeights, optional
    rng_seed : int
    state : TrainState, optional
        Resume from this state (its seed is used) instead of initializing.
    callback : callable, optional
        Called as ``callback(state)`` after every epoch.

    Returns
    -------
    model : HypergraphModel
    trace : list of dict
        One row per epoch with ``epoch,total,pred,entropy,causal``.

    Raises
    ------
    TrainingDivergedError
        If the loss or any parameter becomes non-finite.
    """
    weights = weights or LossWeights()
    if state is None:
        state = init_state(config, data, int(rng_seed))
    model, opt = state.model, state.optimizer
    tr_times, _ = split_times(data.timesteps, config.val_fraction)
    ran = False
    per_batch = max(1, config.batch // data.n_nodes)
    keep = 1.0 - config.dropout
    while state.epoch < config.epochs:
        e = state.epoch
        rng = np.random.default_rng(np.random.SeedSequence([state.seed, e]))
        if config.structure_epochs and e % config.structure_epochs == 0 and model.spec.mp_layers:
            refresh_structure(model, data, tr_times, config)
        U = empirical_targets(model, data, tr_times, config.window)
        order = rng.permutation(tr_times)
        sums = np.zeros(4)
        n_b = 0
        for bi, s in enumerate(range(0, order.size, per_batch)):
            batch = make_batch(data, order[s:s + per_batch], U)
            drop = None
            if config.dropout > 0:
                shape = batch.x.shape
                drop = (_dropout_mask(rng, shape, keep), _dropout_mask(rng, shape, keep))
            total, parts, grads, _ = loss_and_grad(model, batch, weights, drop)
            if not math.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {e + 1}, batch {bi}; "
                    f"parameter norms {_param_norms(model.params)}")
            opt.step(model.params, grads)
            bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
            if bad:
                raise TrainingDivergedError(
                    f"non-finite parameters {bad} after epoch {e + 1}, batch {bi}")
            sums += (total, parts["pred"], parts["entropy"], parts["causal"])
            n_b += 1
        m = sums / max(n_b, 1)
        state.trace.append(dict(epoch=e + 1, total=float(m[0]), pred=float(m[1]),
                                entropy=float(m[2]), causal=float(m[3])))
        state.epoch += 1
        ran = True
        if callback is not None:
            callback(state)
    if ran and config.refit_heads:
        refit_heads(model, data, tr_times, config.window, rng=state.seed)
    return model, state.trace


def refit_heads(model, data, times, window=10, rng=None):
    """Full-batch refit of the aleatoric head and the fusion map.

    With the encoder and readout fixed, the aleatoric head is fit by
    Gaussian likelihood to the training residuals and the fusion map by
    least squares to the windowed proxy ``U_emp``. Minibatch AdamW at the
    default step size barely moves these heads within a desk-scale budget.
    """
    out = predict(model, data, times)
    y = data.targets[times]
    if model.spec.task == "regression":
        r = out["pred"] - y
    else:
        py = np.take_along_axis(out["pred"], y.astype(int)[..., None], axis=-1)[..., 0]
        r = 1.0 - py
    X = data.features[times].reshape(-1, data.n_features)
    ap = fit_aleatoric(X, r.ravel(), rng)
    p = model.params
    p["A1"], p["a1"], p["a2"], p["a2b"] = ap.W1, ap.b1, ap.w2, np.array(ap.b2)
    u_alea = aleatoric_forward(ap.W1, ap.b1, ap.w2, ap.b2, X)[0]
    u_emp = windowed_proxy(r * r, window).ravel()
    fp = fit_fusion(out["u_epi"].ravel(), u_alea, u_emp)
    for k, v in FUSION_KEYS.items():
        p[k] = np.array(getattr(fp, v), dtype=float)
    return model


# ----------------------------------------------------------------------------
# gradient check


def grad_check(model, batch, weights, n_coords=200, step=1e-5, rng=None, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``n_coords`` coordinates are drawn uniformly from all parameters. The
    relative error is ``|a - f| / max(|a|, |f|)``, or the absolute error
    when both magnitudes are below ``floor``.
    """
    rng = np.random.default_rng(rng)
    _, _, grads, _ = loss_and_grad(model, batch, weights)
    keys = sorted(model.params)
    sizes = np.array([model.params[k].size for k in keys])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_total = int(offsets[-1])
    picks = rng.choice(n_total, size=min(n_coords, n_total), replace=False)
    worst = 0.0
    for flat in picks:
        ki = int(np.searchsorted(offsets, flat, side="right") - 1)
        k = keys[ki]
        arr = model.params[k]
        idx = np.unravel_index(int(flat - offsets[ki]), arr.shape)
        old = arr[idx]
        arr[idx] = old + step
        fp = loss_and_grad(model, batch, weights, need_grad=False)[0]
        arr[idx] = old - step
        fm = loss_and_grad(model, batch, weights, need_grad=False)[0]
        arr[idx] = old
        fd = (fp - fm) / (2.0 * step)
        an = float(grads[k][idx])
        scale = max(abs(an), abs(fd))
        err = abs(an - fd) / scale if scale >= floor else abs(an - fd)
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# block-coordinate descent on convex heads


def _bcd_objective(pred, y, u_total, u_emp, weights, l_causal):
    l_pred = float(np.mean((pred - y) ** 2))
    l_ent = float(np.mean((u_total - u_emp) ** 2))
    return l_pred + weights.lambda1 * l_ent + weights.lambda2 * l_causal


def block_coordinate_train(config, data, weights=None, rng_seed=0, max_cycles=20,
                           tol=1e-12, slack=1e-10, lm_tries=20):
    """Cyclic updates of readout (theta), aleatoric output layer (phi) and
    linear fusion (omega) on full-batch regression data with a fixed encoder.

    * theta: exact least squares for the linear readout on the fixed
      message-passing states;
    * phi: damped Gauss-Newton (Levenberg-Marquardt) step on the aleatoric
      output layer, accepted only if the objective does not increase;
    * omega: exact non-negative least squares for ``c + e1 U_epi + e2 U_alea``.

    ``U_emp`` is computed once from the residuals of the first least-squares
    readout and held fixed, so each block solves (or descends) the same
    full-batch objective.

    Returns
    -------
    model : HypergraphModel
    trace : list of dict
        ``(update, block, objective)`` after every block update, starting
        with the initial objective as update 0.

    Raises
    ------
    TrainingDivergedError
        If any block update increases the objective by more than ``slack``.
    """
    if data.task != "regression":
        raise ValueError("block-coordinate mode needs a regression task")
    weights = weights or LossWeights()
    state = init_state(config, data, int(rng_seed))
    model = state.model
    p = model.params
    for k in ("fW1", "fW2", "fv"):
        p[k] = np.zeros_like(p[k])
    tr_times, _ = split_times(data.timesteps, config.val_fraction)
    out, cache = forward(model, make_batch(data, tr_times))
    S = cache["H"]
    y = data.targets[tr_times].ravel()
    u_epi = out["u_epi"]
    Xs = np.hstack([S, np.ones((S.shape[0], 1))])
    Z = np.tanh(cache["acache"][0] @ p["A1"].T + p["a1"])
    l_causal = 0.0  # encoder and structure are fixed

    def readout():
        return Xs @ np.concatenate([p["Rw"][0], p["Rb"]])

    def alea(a2, a2b):
        return np.logaddexp(0.0, Z @ a2 + a2b)

    def fused(ua):
        return p["fc"] + p["fs1"] ** 2 * u_epi + p["fs2"] ** 2 * ua

    # fixed empirical proxy from a preliminary least-squares readout
    coef, *_ = np.linalg.lstsq(Xs, y, rcond=None)
    r2 = ((Xs @ coef - y) ** 2).reshape(tr_times.size, data.n_nodes)
    u_emp = windowed_proxy(r2, config.window).ravel()

    def J():
        return _bcd_objective(readout(), y, fused(alea(p["a2"], p["a2b"])), u_emp,
                              weights, l_causal)

    trace = [dict(update=0, block="init", objective=J())]

    def record(block):
        val = J()
        prev = trace[-1]["objective"]
        trace.append(dict(update=len(trace), block=block, objective=val))
        if val > prev + slack:
            raise TrainingDivergedError(
                f"objective increased by {val - prev:.3e} at {block} update; trace {trace}")
        return val

    mu = 1e-3
    for _ in range(max_cycles):
        start = trace[-1]["objective"]
        # theta
        coef, *_ = np.linalg.lstsq(Xs, y, rcond=None)
        p["Rw"] = coef[:-1][None, :].copy()
        p["Rb"] = coef[-1:].copy()
        record("theta")
        # phi: LM on the output layer of the aleatoric head
        w = np.concatenate([p["a2"], [float(p["a2b"])]])
        Zb = np.hstack([Z, np.ones((Z.shape[0], 1))])
        a = Zb @ w
        e2 = float(p["fs2"] ** 2)
        res = fused(np.logaddexp(0.0, a)) - u_emp
        Jac = (e2 * np.exp(-np.logaddexp(0.0, -a)))[:, None] * Zb
        JtJ = Jac.T @ Jac
        g = Jac.T @ res
        f0 = float(res @ res)
        for _ in range(lm_tries):
            w_new = w - np.linalg.solve(JtJ + mu * (np.diag(np.diag(JtJ)) + 1e-12 * np.eye(w.size)), g)
            r_new = fused(np.logaddexp(0.0, Zb @ w_new)) - u_emp
            if float(r_new @ r_new) <= f0:
                p["a2"], p["a2b"] = w_new[:-1].copy(), np.array(w_new[-1])
                mu = max(mu / 3.0, 1e-12)
                break
            mu *= 10.0
        record("phi")
        # omega
        lin = fit_linear_fusion(u_epi, alea(p["a2"], p["a2b"]), u_emp)
        cand = (np.array(lin.c), np.array(lin.s1), np.array(lin.s2))
        old = (p["fc"], p["fs1"], p["fs2"])
        before = J()
        p["fc"], p["fs1"], p["fs2"] = cand
        if J() > before:
            # keep the incumbent if the bounded solver lands marginally worse
            p["fc"], p["fs1"], p["fs2"] = old
        record("omega")
        if start - trace[-1]["objective"] <= tol:
            break
    return model, trace


# ----------------------------------------------------------------------------
# checkpoints and traces


def _enc(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _dec(d):
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def save_checkpoint(path, state, config=None):
    """Write a JSON checkpoint with a ``header`` block.

    Keys are sorted and floats use shortest round-trip repr, so identical
    states produce byte-identical files.
    """
    m = state.model
    spec = m.spec
    doc = {
        "header": dict(format_version=FORMAT_VERSION, D=spec.dim, d=spec.n_features,
                       N=spec.n_nodes, seed=int(state.seed)),
        "spec": asdict(spec),
        "config": None if config is None else asdict(config),
        "epoch": int(state.epoch),
        "params": {k: _enc(v) for k, v in m.params.items()},
        "mask": _enc(m.mask.astype(float)),
        "gamma": _enc(m.gamma),
        "constraints": [[int(j), int(i), float(v)] for (j, i), v in sorted(m.constraints.items())],
        "adam": {"t": int(state.optimizer.t),
                 "m": {k: _enc(v) for k, v in state.optimizer.m.items()},
                 "v": {k: _enc(v) for k, v in state.optimizer.v.items()},
                 "hyper": [state.optimizer.lr, state.optimizer.beta1, state.optimizer.beta2,
                           state.optimizer.eps, state.optimizer.weight_decay]},
        "trace": state.trace,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(state, config)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    hdr = doc.get("header", {})
    if hdr.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {hdr.get('format_version')!r}")
    spec = ModelSpec(**doc["spec"])
    params = {k: _dec(v) for k, v in doc["params"].items()}
    cons = {(int(j), int(i)): float(v) for j, i, v in doc["constraints"]}
    model = HypergraphModel(spec, params, _dec(doc["mask"]) > 0.5, _dec(doc["gamma"]), cons)
    lr, b1, b2, eps, wd = doc["adam"]["hyper"]
    opt = AdamW(lr, b1, b2, eps, wd)
    opt.t = int(doc["adam"]["t"])
    opt.m = {k: _dec(v) for k, v in doc["adam"]["m"].items()}
    opt.v = {k: _dec(v) for k, v in doc["adam"]["v"].items()}
    config = None
    if doc.get("config") is not None:
        names = {f.name for f in fields(TrainConfig)}
        config = TrainConfig(**{k: v for k, v in doc["config"].items() if k in names})
    state = TrainState(model, opt, int(doc["epoch"]), int(hdr["seed"]), list(doc["trace"]))
    return state, config


def write_trace(path, trace):
    """Loss trace as ``epoch,total,pred,entropy,causal`` CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,total,pred,entropy,causal\n")
        for r in trace:
            fh.write(f"{r['epoch']},{r['total']!r},{r['pred']!r},{r['entropy']!r},{r['causal']!r}\n")
