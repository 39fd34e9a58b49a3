"""
scikit-learn style wrappers.

The estimators follow the ``fit``/``predict`` conventions (constructor
arguments stored verbatim, fitted state in trailing-underscore attributes)
so ``get_params``/``set_params``/``clone`` work. Inputs are not 2-D design
matrices: the forecaster takes a :class:`~vmfcausal.data.TemporalHypergraph`
and the structure learner a ``(T, N, D)`` latent series.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import structure as st
from .model import LossWeights, predict
from .training import TrainConfig, split_times, train

__all__ = ["HypergraphForecaster", "CausalStructureLearner"]


class HypergraphForecaster(BaseEstimator):
    """Spherical hypergraph forecaster with fused uncertainty.

    Parameters mirror :class:`~vmfcausal.training.TrainConfig` plus the two
    loss weights and the seed.
    """

    def __init__(self, epochs=50, lr=5e-4, batch=256, weight_decay=0.01, dropout=0.3,
                 mp_layers=3, d_sphere=16, structure_epochs=20, sparsity=2,
                 structure_alpha=0.01, structure_lam="cv-min", gate_mode="frozen",
                 window=10, val_fraction=0.2, refit_heads=True,
                 lambda1=0.1, lambda2=0.01, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.mp_layers = mp_layers
        self.d_sphere = d_sphere
        self.structure_epochs = structure_epochs
        self.sparsity = sparsity
        self.structure_alpha = structure_alpha
        self.structure_lam = structure_lam
        self.gate_mode = gate_mode
        self.window = window
        self.val_fraction = val_fraction
        self.refit_heads = refit_heads
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.random_state = random_state

    def _config(self):
        p = self.get_params()
        kw = {k: p[k] for k in TrainConfig.__dataclass_fields__ if k in p}
        return TrainConfig(**kw)

    def fit(self, data, y=None):
        """Train on ``data`` (a TemporalHypergraph); ``y`` is ignored."""
        cfg = self._config()
        weights = LossWeights(self.lambda1, self.lambda2)
        self.model_, self.trace_ = train(cfg, data, weights, rng_seed=int(self.random_state))
        self.train_times_, self.val_times_ = split_times(data.timesteps, cfg.val_fraction)
        self.n_nodes_ = data.n_nodes
        return self

    def _check(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def _times(self, data, times):
        if times is None:
            return np.arange(1, data.timesteps)
        return np.asarray(times, dtype=int)

    def predict(self, data, times=None):
        """Point forecasts ``(len(times), N)``; class labels for classification."""
        self._check()
        out = predict(self.model_, data, self._times(data, times))
        if self.model_.spec.task == "classification":
            return out["pred"].argmax(-1)
        return out["pred"]

    def predict_proba(self, data, times=None):
        self._check()
        if self.model_.spec.task != "classification":
            raise AttributeError("predict_proba is only available for classification")
        return predict(self.model_, data, self._times(data, times))["pred"]

    def predict_uncertainty(self, data, times=None):
        """Dict of ``u_epi``, ``u_alea``, ``u_total`` and ``kappa``, each ``(len(times), N)``."""
        self._check()
        out = predict(self.model_, data, self._times(data, times))
        return {k: out[k] for k in ("u_epi", "u_alea", "u_total", "kappa")}

    def score(self, data, times=None):
        """Negative MSE (regression) or accuracy (classification) on ``times``.

        Defaults to the held-out tail used during fitting.
        """
        self._check()
        times = self.val_times_ if times is None else np.asarray(times, dtype=int)
        y = data.targets[times]
        pred = self.predict(data, times)
        if self.model_.spec.task == "classification":
            return float(np.mean(pred == y))
        return -float(np.mean((pred - y) ** 2))


class CausalStructureLearner(BaseEstimator):
    """Lagged group test followed by group-lasso pruning.

    Parameters
    ----------
    lag : int
    alpha : float
        FDR level of the screening step.
    sparsity : int
        Maximum parents per node.
    lam : float or "cv"
    """

    def __init__(self, lag=2, alpha=0.01, sparsity=2, lam="cv"):
        self.lag = lag
        self.alpha = alpha
        self.sparsity = sparsity
        self.lam = lam

    def fit(self, latents, y=None):
        """Fit on a ``(T, N, D)`` latent series; ``y`` is ignored."""
        latents = np.asarray(latents, dtype=float)
        self.edge_scores_ = st.var_init(latents, lag=self.lag, alpha=self.alpha)
        N = latents.shape[1]
        if any(e.significant for e in self.edge_scores_):
            self.structure_ = st.lasso_refine(latents, self.edge_scores_, self.lam,
                                              self.sparsity, lag=self.lag)
            self.parents_ = dict(self.structure_.parents)
        else:
            self.structure_ = None
            self.parents_ = {i: () for i in range(N)}
        self.gates_ = st.gate_scores(self.structure_, self.edge_scores_) if self.structure_ else {}
        self.n_nodes_ = N
        return self

    @property
    def edges_(self):
        return sorted((j, i) for i, pa in self.parents_.items() for j in pa)

    def ranked_edges(self):
        """All candidate edges, significant first, by decreasing score."""
        if not hasattr(self, "edge_scores_"):
            raise NotFittedError("call fit first")
        return st.rank_edges(self.edge_scores_)

    def adjacency(self):
        """``(N, N)`` gate matrix with ``A[dst, src]``."""
        if not hasattr(self, "gates_"):
            raise NotFittedError("call fit first")
        return st.gate_matrix(self.gates_, self.n_nodes_)
