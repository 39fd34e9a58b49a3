"""Tests for the composite objective, gradients, the training loop and block-coordinate descent."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import lsq_linear
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vmfcausal import training as tr
from vmfcausal.data import SyntheticSpec, gen_synthetic
from vmfcausal.estimators import HypergraphForecaster
from vmfcausal.exceptions import ConfigError, TrainingDivergedError
from vmfcausal.metrics import macro_f1
from vmfcausal.model import (HypergraphModel, LossWeights, ModelSpec, forward, loss_and_grad,
                             make_batch, predict)
from vmfcausal.uncertainty import fit_linear_fusion


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(SyntheticSpec(n_nodes=6, timesteps=40, dim=8, n_features=5, seed=1))


def perturbed_model(data, truth, seed, task="regression", gate_mode="frozen"):
    spec = ModelSpec(data.n_nodes, data.n_features, dim=8, mp_layers=2, task=task,
                     n_classes=data.n_classes, gate_mode=gate_mode)
    m = HypergraphModel.init(spec, seed)
    parents = {i: p for i, p in enumerate(truth.model.parents)}
    m.set_structure(parents, {(j, i): 0.7 for i, p in parents.items() for j in p})
    m.constraints = {(0, 1): 0.3}
    rng = np.random.default_rng(seed)
    for k in m.params:
        m.params[k] = np.asarray(m.params[k] + 0.3 * rng.standard_normal(m.params[k].shape))
    return m


class TestCompositeLoss:
    def test_arithmetic(self):
        assert LossWeights(0.1, 0.01).combine(1.0, 0.5, 0.2) == pytest.approx(1.052, abs=1e-15)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 0.0)

    def test_reduces_to_prediction_loss(self, small):
        data, truth = small
        m = perturbed_model(data, truth, 0)
        b = make_batch(data, [3, 7], np.random.default_rng(0).uniform(0, 2, (40, 6)))
        total, parts = tr.composite_loss(m, b, LossWeights(0.0, 0.0))
        assert total == parts["pred"]
        total, parts = tr.composite_loss(m, b, LossWeights(0.3, 0.2))
        assert total == pytest.approx(parts["pred"] + 0.3 * parts["entropy"] + 0.2 * parts["causal"],
                                      rel=1e-15)
        assert min(parts.values()) >= 0 and parts["causal"] > 0

    def test_zero_at_perfect_fit(self, small):
        data, _ = small
        m = HypergraphModel.init(ModelSpec(6, 5, dim=8), 0)
        m.params["Rw"][:] = 0.0
        b = make_batch(data, [2, 5])
        b.y = np.zeros_like(b.y)
        out, _ = forward(m, b)
        b.u_emp = out["u_total"].reshape(b.y.shape)
        total, parts = tr.composite_loss(m, b, LossWeights())
        assert total == 0.0 and parts == dict(pred=0.0, entropy=0.0, causal=0.0)

    def test_empty_batch(self, small):
        with pytest.raises(ValueError):
            make_batch(small[0], [])


class TestGradCheck:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_inits(self, small, seed):
        data, truth = small
        m = perturbed_model(data, truth, seed)
        b = make_batch(data, [5 + seed], np.random.default_rng(seed).uniform(0, 1, (40, 6)))
        assert b.n_items <= 8
        assert tr.grad_check(m, b, LossWeights(0.3, 0.2), rng=seed) <= 1e-4

    def test_prediction_path_only(self, small):
        data, truth = small
        m = perturbed_model(data, truth, 3)
        b = make_batch(data, [4])
        assert tr.grad_check(m, b, LossWeights(0.0, 0.0), rng=3) <= 1e-4

    def test_classification_learned_gates(self):
        data, truth = gen_synthetic(SyntheticSpec(n_nodes=4, timesteps=30, dim=8, n_features=5,
                                                  task="classification", seed=2))
        m = perturbed_model(data, truth, 4, task="classification", gate_mode="learned")
        b = make_batch(data, [3, 6], np.random.default_rng(4).uniform(0, 1, (30, 4)))
        assert b.n_items == 8
        assert tr.grad_check(m, b, LossWeights(0.3, 0.2), rng=4) <= 1e-4

    def test_zero_target_readout_stationary(self, small):
        data, truth = small
        m = perturbed_model(data, truth, 5)
        m.params["Rw"][:] = 0.0
        m.params["Rb"][:] = 0.0
        b = make_batch(data, [2, 3])
        b.y = np.zeros_like(b.y)
        _, _, g, _ = loss_and_grad(m, b, LossWeights(0.0, 0.0))
        assert not g["Rw"].any() and not g["Rb"].any()


class TestTrain:
    def test_zero_epochs(self, small):
        data, _ = small
        cfg = tr.TrainConfig(epochs=0, d_sphere=8)
        m, trace = tr.train(cfg, data, rng_seed=3)
        ref = tr.init_state(cfg, data, 3).model
        assert trace == []
        assert all(np.array_equal(m.params[k], ref.params[k]) for k in ref.params)

    def test_trace_and_determinism(self, small):
        data, _ = small
        cfg = tr.TrainConfig(epochs=3, d_sphere=8, structure_epochs=2)
        a, ta = tr.train(cfg, data, rng_seed=4)
        b, tb = tr.train(cfg, data, rng_seed=4)
        assert [r["epoch"] for r in ta] == [1, 2, 3]
        assert set(ta[0]) == {"epoch", "total", "pred", "entropy", "causal"}
        assert ta == tb
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        c, _ = tr.train(cfg, data, rng_seed=5)
        assert not np.array_equal(a.params["W"], c.params["W"])

    def test_resume_matches_uninterrupted(self, small, tmp_path):
        data, _ = small
        cfg = tr.TrainConfig(epochs=4, d_sphere=8, structure_epochs=3)
        full, tfull = tr.train(cfg, data, rng_seed=6)
        path = tmp_path / "ckpt.json"

        def cb(state):
            if state.epoch == 2:
                tr.save_checkpoint(path, state, cfg)
        tr.train(tr.TrainConfig(epochs=2, d_sphere=8, structure_epochs=3), data, rng_seed=6,
                 callback=cb)
        state, cfg2 = tr.load_checkpoint(path)
        assert cfg2 == cfg and state.epoch == 2
        resumed, tres = tr.train(cfg, data, state=state)
        assert tres == tfull
        assert all(np.array_equal(full.params[k], resumed.params[k]) for k in full.params)

    def test_checkpoint_round_trip(self, small, tmp_path):
        data, _ = small
        cfg = tr.TrainConfig(epochs=1, d_sphere=8)
        state = tr.init_state(cfg, data, 7)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        tr.save_checkpoint(p1, state, cfg)
        back, _ = tr.load_checkpoint(p1)
        tr.save_checkpoint(p2, back, cfg)
        assert p1.read_bytes() == p2.read_bytes()
        hdr = json.loads(p1.read_text())["header"]
        assert (hdr["D"], hdr["d"], hdr["N"], hdr["seed"]) == (8, 5, 6, 7)
        doc = json.loads(p1.read_text())
        doc["header"]["format_version"] = 999
        p1.write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            tr.load_checkpoint(p1)

    def test_nan_guard(self, small):
        data, _ = small
        cfg = tr.TrainConfig(epochs=1, d_sphere=8)
        state = tr.init_state(cfg, data, 0)
        state.model.params["Rb"][:] = np.nan
        with pytest.raises(TrainingDivergedError, match="parameter norms"):
            tr.train(cfg, data, state=state)

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(batch=0), dict(epochs=-1),
                                    dict(dropout=1.0), dict(val_fraction=1.0),
                                    dict(gate_mode="soft")])
    def test_config_errors(self, kw):
        with pytest.raises(ConfigError):
            tr.TrainConfig(**kw)

    @given(st.integers(0, 2 ** 31), st.floats(0.01, 0.99))
    @settings(max_examples=50, deadline=None)
    def test_dropout_mask_keeps_a_feature(self, seed, keep):
        m = tr._dropout_mask(np.random.default_rng(seed), (40, 3), keep)
        assert np.all(m.any(axis=-1))
        assert set(np.unique(m)) <= {0.0, 1.0 / keep}

    def test_split_times(self):
        a, b = tr.split_times(10, 0.2)
        assert a.tolist() == list(range(1, 8)) and b.tolist() == [8, 9]
        with pytest.raises(ValueError):
            tr.split_times(3, 0.5)

    @pytest.mark.slow
    def test_descent_on_standard_task(self):
        data, _ = gen_synthetic(SyntheticSpec(seed=0))
        _, trace = tr.train(tr.TrainConfig(epochs=50), data, rng_seed=0)
        assert len(trace) == 50
        assert trace[-1]["total"] < trace[0]["total"]

    @pytest.mark.slow
    def test_separable_classification(self):
        data, _ = gen_synthetic(SyntheticSpec(task="classification", separable=True,
                                              timesteps=600, seed=0))
        times, _ = tr.split_times(data.timesteps, 0.2)
        m, _ = tr.train(tr.TrainConfig(epochs=50, dropout=0.0), data, rng_seed=0)
        pred = predict(m, data, times)["pred"].argmax(-1)
        assert macro_f1(pred.ravel(), data.targets[times].ravel(), 2) >= 0.95


@pytest.fixture(scope="module")
def bcd_run():
    data, _ = gen_synthetic(SyntheticSpec(seed=0))
    return tr.block_coordinate_train(tr.TrainConfig(), data, rng_seed=0, max_cycles=40)


class TestBlockCoordinate:
    def test_monotone(self, bcd_run):
        _, trace = bcd_run
        obj = np.array([r["objective"] for r in trace])
        assert len(obj) - 1 >= 30
        assert np.all(np.diff(obj) <= 1e-10)
        assert [r["block"] for r in trace[1:4]] == ["theta", "phi", "omega"]

    def test_stationary_at_convergence(self):
        # without the calibration term only the exact readout block matters,
        # so the loop stops on its tolerance after the second cycle
        data, _ = gen_synthetic(SyntheticSpec(seed=0))
        _, trace = tr.block_coordinate_train(tr.TrainConfig(), data, LossWeights(0.0, 0.0),
                                             max_cycles=40)
        obj = [r["objective"] for r in trace]
        assert len(trace) == 7
        assert abs(obj[-4] - obj[-1]) <= 1e-10

    def test_progress_shrinks(self, bcd_run):
        obj = np.array([r["objective"] for r in bcd_run[1]])
        per_cycle = obj[:-3:3] - obj[3::3]
        assert per_cycle[-1] < per_cycle[0] / 100

    def test_needs_regression(self):
        data, _ = gen_synthetic(SyntheticSpec(n_nodes=5, timesteps=30, task="classification"))
        with pytest.raises(ValueError):
            tr.block_coordinate_train(tr.TrainConfig(), data)

    @pytest.mark.parametrize("seed", range(5))
    def test_omega_block_matches_bounded_least_squares(self, seed):
        # the omega update is the bounded least-squares fusion fit
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=400), rng.uniform(0, 1, 400)
        coef = rng.normal(size=3)
        t = coef[0] + coef[1] * a + coef[2] * b + 0.05 * rng.normal(size=400)
        ref = lsq_linear(np.column_stack([np.ones(400), a, b]), t,
                         bounds=([-np.inf, 0, 0], [np.inf, np.inf, np.inf]), tol=1e-14)
        p = fit_linear_fusion(a, b, t)
        np.testing.assert_allclose([p.c, p.s1 ** 2, p.s2 ** 2], ref.x, atol=1e-8)


class TestForecasterEstimator:
    def test_fit_predict_score(self, small):
        data, _ = small
        est = HypergraphForecaster(epochs=2, d_sphere=8, structure_epochs=1)
        with pytest.raises(NotFittedError):
            est.predict(data)
        est.fit(data)
        assert est.predict(data).shape == (39, 6)
        assert est.predict(data, [1, 2]).shape == (2, 6)
        u = est.predict_uncertainty(data, [5])
        assert set(u) == {"u_epi", "u_alea", "u_total", "kappa"}
        assert est.score(data) <= 0
        twin = clone(est).fit(data)
        np.testing.assert_array_equal(twin.predict(data), est.predict(data))
        with pytest.raises(AttributeError):
            est.predict_proba(data)

    def test_classification(self):
        data, _ = gen_synthetic(SyntheticSpec(n_nodes=5, timesteps=30, task="classification"))
        est = HypergraphForecaster(epochs=1, d_sphere=8).fit(data)
        proba = est.predict_proba(data, [3])
        np.testing.assert_allclose(proba.sum(-1), 1.0, atol=1e-12)
        assert set(np.unique(est.predict(data))) <= {0, 1}
        assert 0.0 <= est.score(data) <= 1.0
