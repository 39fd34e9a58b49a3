"""Tests for spherical encoding, the concentration head, attention and message passing."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmfcausal import sphere
from vmfcausal.exceptions import DegenerateAggregationError, DegenerateProjectionError


def unit_rows(rng, n, D):
    X = rng.standard_normal((n, D))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


class TestProjectNormalize:
    def test_three_four_five(self):
        h = sphere.project_normalize(np.eye(2), np.zeros(2), [3.0, 4.0])
        np.testing.assert_allclose(h, [0.6, 0.8], rtol=0, atol=1e-15)

    def test_already_unit(self):
        W = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        h = sphere.project_normalize(W, np.zeros(2), [1.0, 5.0, -2.0])
        np.testing.assert_array_equal(h, [1.0, 0.0])

    def test_zero_input_raises(self):
        with pytest.raises(DegenerateProjectionError):
            sphere.project_normalize(np.eye(3), np.zeros(3), np.zeros(3))

    def test_batch_rows_unit(self):
        rng = np.random.default_rng(0)
        h = sphere.project_normalize(rng.normal(size=(16, 5)), rng.normal(size=16),
                                     rng.normal(size=(50, 5)))
        np.testing.assert_allclose(np.linalg.norm(h, axis=1), 1.0, atol=1e-12)

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(6, 3))
        up = rng.normal(size=(6, 4))
        z = x @ W.T + b
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        dW, db = sphere.project_normalize_backward(up, x, z / norms, norms)
        f = lambda W_, b_: np.sum(up * sphere.project_normalize(W_, b_, x))
        eps = 1e-6
        num = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            E = np.zeros_like(W)
            E[idx] = eps
            num[idx] = (f(W + E, b) - f(W - E, b)) / (2 * eps)
        np.testing.assert_allclose(dW, num, rtol=1e-6, atol=1e-9)
        numb = np.array([(f(W, b + eps * e) - f(W, b - eps * e)) / (2 * eps) for e in np.eye(4)])
        np.testing.assert_allclose(db, numb, rtol=1e-6, atol=1e-9)


class TestConcentration:
    def test_zero_head(self):
        # softplus(0) = log 2 squashed by 1 - exp(-s) gives 1/2
        k = sphere.concentration(np.zeros(5), 0.0, np.eye(5)[0])
        assert k == pytest.approx(100.5, abs=1e-12)

    @given(st.integers(0, 2 ** 31), st.floats(0.0, 1e3))
    @settings(max_examples=60, deadline=None)
    def test_range(self, seed, scale):
        rng = np.random.default_rng(seed)
        h = unit_rows(rng, 20, 6)
        k = sphere.concentration(scale * rng.normal(size=6), scale * rng.normal(), h)
        assert np.all(k >= 1.0) and np.all(k <= 200.0)

    def test_antipodal_finite(self):
        rng = np.random.default_rng(3)
        w, h = rng.normal(size=4), unit_rows(rng, 1, 4)[0]
        k1, k2 = sphere.concentration(w, 0.2, h), sphere.concentration(w, 0.2, -h)
        assert np.isfinite(k1) and np.isfinite(k2) and k1 > 0 and k2 > 0
        assert (k1 - 100.5) * (k2 - 100.5) <= 0

    def test_backward(self):
        rng = np.random.default_rng(4)
        w, c, h = rng.normal(size=5), 0.3, unit_rows(rng, 7, 5)
        up = rng.normal(size=7)
        dw, dc, dh = sphere.concentration_backward(up, w, c, h)
        eps = 1e-6
        f = lambda w_, c_, h_: float(up @ sphere.concentration(w_, c_, h_))
        numw = [(f(w + eps * e, c, h) - f(w - eps * e, c, h)) / (2 * eps) for e in np.eye(5)]
        np.testing.assert_allclose(dw, numw, rtol=1e-6)
        assert dc == pytest.approx((f(w, c + eps, h) - f(w, c - eps, h)) / (2 * eps), rel=1e-6)
        E = np.zeros_like(h)
        E[2, 1] = eps
        assert dh[2, 1] == pytest.approx((f(w, c, h + E) - f(w, c, h - E)) / (2 * eps), rel=1e-6)


class TestAngularAttention:
    def test_two_neighbors(self):
        a = sphere.angular_attention(np.array([1.0, 0.0]), np.eye(2), 1.0)
        e = math.e
        np.testing.assert_allclose(a, [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)
        np.testing.assert_allclose(a, [0.7310585786300049, 0.2689414213699951], atol=1e-15)

    def test_uniform_limit(self):
        rng = np.random.default_rng(5)
        for m in (1, 2, 7, 30):
            a = sphere.angular_attention(unit_rows(rng, 1, 8)[0], unit_rows(rng, m, 8), 1e-12)
            np.testing.assert_allclose(a, 1.0 / m, atol=1e-9)

    def test_sharp_limit(self):
        h = np.array([1.0, 0.0, 0.0])
        nb = np.array([[1.0, 0.0, 0.0], [0.99, np.sqrt(1 - 0.99 ** 2), 0.0], [0.0, 1.0, 0.0]])
        a = sphere.angular_attention(h, nb, 1e3)
        assert a[0] >= 0.999

    def test_sums_to_one_and_large_inputs(self):
        rng = np.random.default_rng(6)
        a = sphere.angular_attention(unit_rows(rng, 1, 4)[0], unit_rows(rng, 9, 4), 1e8)
        assert np.all(np.isfinite(a)) and abs(a.sum() - 1.0) <= 1e-12

    @given(st.integers(0, 2 ** 31), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, seed, shift):
        # a common additive shift of the logits leaves the softmax unchanged;
        # appending a coordinate shared by the query and every neighbour is one
        rng = np.random.default_rng(seed)
        h = rng.normal(size=3)
        nb = rng.normal(size=(5, 3))
        a = sphere.angular_attention(h, nb, 1.0)
        h2 = np.append(h, 1.0)
        nb2 = np.column_stack([nb, np.full(5, shift)])
        np.testing.assert_allclose(sphere.angular_attention(h2, nb2, 1.0), a, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            sphere.angular_attention(np.ones(2), np.zeros((0, 2)), 1.0)
        with pytest.raises(ValueError):
            sphere.angular_attention(np.ones(2), np.ones((2, 2)), 0.0)


class TestMessagePassing:
    def test_identity_without_edges_or_parents(self):
        H = unit_rows(np.random.default_rng(7), 6, 4)
        np.testing.assert_allclose(sphere.message_passing_step(H, [], 1.0), H, atol=1e-15)

    def test_parallel_pair_unchanged(self):
        H = unit_rows(np.random.default_rng(8), 4, 3)
        H[1] = H[0]
        out = sphere.message_passing_step(H, [[0, 1]], 2.0)
        np.testing.assert_allclose(out[0], H[0], atol=1e-15)
        np.testing.assert_allclose(out[1], H[0], atol=1e-15)

    def test_zero_gates_ignore_parents(self):
        rng = np.random.default_rng(9)
        H = unit_rows(rng, 5, 4)
        P = unit_rows(rng, 5, 4)
        Wc = rng.normal(size=(4, 4))
        a = sphere.message_passing_step(H, [[0, 1, 2]], 1.0, Wc, np.zeros((5, 5)), P)
        b = sphere.message_passing_step(H, [[0, 1, 2]], 1.0)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_causal_pass_through(self):
        H = np.array([[1.0, 0.0], [0.0, 1.0]])
        G = np.array([[0.0, 0.0], [1.0, 0.0]])
        # node 1 gets its own state plus node 0's state
        out = sphere.message_passing_step(H, [], 1.0, np.eye(2), G)
        np.testing.assert_allclose(out[1], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-15)
        np.testing.assert_allclose(out[0], H[0], atol=1e-15)

    def test_mean_over_hyperedges(self):
        rng = np.random.default_rng(10)
        H = unit_rows(rng, 4, 3)
        ka = 1.7
        out = sphere.message_passing_step(H, [[0, 1], [0, 2, 3]], ka)
        m1 = sphere.angular_attention(H[0], H[[0, 1]], ka) @ H[[0, 1]]
        m2 = sphere.angular_attention(H[0], H[[0, 2, 3]], ka) @ H[[0, 2, 3]]
        z = H[0] + 0.5 * (m1 + m2)
        np.testing.assert_allclose(out[0], z / np.linalg.norm(z), atol=1e-14)

    def test_degenerate_aggregate(self):
        H = np.array([[1.0, 0.0], [0.0, 1.0]])
        G = np.array([[0.0, 1.0], [0.0, 0.0]])
        Wc = np.array([[0.0, -1.0], [0.0, 0.0]])
        with pytest.raises(DegenerateAggregationError):
            sphere.message_passing_step(H, [], 1.0, Wc, G)

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_unit_norm_and_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        N, D = 7, 5
        H = unit_rows(rng, N, D)
        edges = [rng.choice(N, int(rng.integers(2, 5)), replace=False) for _ in range(3)]
        G = np.where(rng.random((N, N)) < 0.2, rng.random((N, N)), 0.0)
        np.fill_diagonal(G, 0.0)
        Wc = rng.normal(size=(D, D))
        out = sphere.message_passing_step(H, edges, 0.8, Wc, G)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)
        perm = rng.permutation(N)
        inv = np.argsort(perm)
        out_p = sphere.message_passing_step(H[perm], [inv[e] for e in edges], 0.8, Wc,
                                            G[np.ix_(perm, perm)])
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


class TestAngleDistortion:
    def test_identity_and_orthogonal(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(20, 6))
        assert sphere.angle_distortion(X, np.eye(6)) == 0.0
        Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert sphere.angle_distortion(X, Q) <= 1e-12

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            sphere.angle_distortion(np.ones((1, 3)), np.eye(3))

    def test_jl_dimension(self):
        # ceil(8 ln 64 / 0.09) = ceil(369.68...)
        assert sphere.jl_dimension(64, 0.3) == 370

    def test_jl_success_rate(self):
        eps, n, d = 0.3, 64, 1000
        D = sphere.jl_dimension(n, eps)
        ok = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(n, d))
            W = rng.normal(scale=1 / np.sqrt(D), size=(D, d))
            ok += sphere.angle_distortion(X, W) <= eps
        assert ok >= 95
