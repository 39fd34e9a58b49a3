"""Tests for the von Mises-Fisher primitives and the Bessel routines."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ive

from vmfcausal import vmf
from vmfcausal._bessel import bessel_ratio, log_iv, one_minus_bessel_ratio
from vmfcausal.exceptions import DomainError, SaturationError

mpmath.mp.dps = 40


# D = 3 closed forms: C_3(k) = k / (4 pi sinh k), A_3(k) = coth k - 1/k
def logc3(k):
    if k > 30:
        return math.log(k / (2 * math.pi)) - k - math.log1p(-math.exp(-2 * k))
    return math.log(k / (4 * math.pi * math.sinh(k)))


def a3(k):
    return 1.0 / math.tanh(k) - 1.0 / k


def mp_log_iv(nu, x):
    return float(mpmath.log(mpmath.besseli(nu, x)))


def mp_ratio(nu, x):
    return mpmath.besseli(nu + 1, x) / mpmath.besseli(nu, x)


class TestBessel:
    @pytest.mark.parametrize("dim", [2, 3, 5, 8, 16, 25, 26, 64, 128, 512])
    @pytest.mark.parametrize("x", [1e-4, 0.3, 7.0, 49.0, 51.0, 120.0, 700.0, 1e4, 1e6])
    def test_log_iv_matches_mpmath(self, dim, x):
        nu = dim / 2 - 1
        ref = mp_log_iv(nu, x)
        assert log_iv(nu, x) == pytest.approx(ref, rel=1e-13, abs=1e-13)

    @pytest.mark.parametrize("dim", [2, 3, 8, 24, 26, 128, 512])
    @pytest.mark.parametrize("x", [1e-3, 2.0, 60.0, 300.0, 2e3, 1e6])
    def test_ratio_and_complement(self, dim, x):
        nu = dim / 2 - 1
        r = mp_ratio(nu, x)
        assert bessel_ratio(nu, x) == pytest.approx(float(r), rel=1e-13)
        assert one_minus_bessel_ratio(nu, x) == pytest.approx(float(1 - r), rel=1e-9)

    def test_against_scaled_scipy(self):
        xs = np.linspace(0.5, 400.0, 97)
        for nu in (0.0, 0.5, 3.0, 7.0, 15.0):
            ref = np.log(ive(nu, xs)) + xs
            np.testing.assert_allclose(log_iv(nu, xs), ref, rtol=1e-12)

    def test_no_overflow_where_direct_evaluation_fails(self):
        # I_255(1e6) overflows a double; the log does not
        val = log_iv(255.0, 1e6)
        assert np.isfinite(val)
        assert val == pytest.approx(mp_log_iv(255.0, 1e6), rel=1e-13)


class TestLogNormalizer:
    def test_uniform_values(self):
        assert vmf.log_normalizer(2, 0.0) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)
        assert vmf.log_normalizer(3, 0.0) == pytest.approx(-math.log(4 * math.pi), abs=1e-15)

    def test_closed_form_d3(self):
        # -2.692464 (the rounded -2.692487 occasionally quoted is off in the 5th decimal)
        assert vmf.log_normalizer(3, 1.0) == pytest.approx(-2.6924636085404865, rel=1e-14)

    @pytest.mark.parametrize("kappa", [0.01, 0.1, 1.0, 10.0, 100.0])
    def test_d3_oracle(self, kappa):
        assert vmf.log_normalizer(3, kappa) == pytest.approx(logc3(kappa), rel=1e-10)

    def test_continuity_at_zero(self):
        for dim in (2, 3, 8, 128):
            assert vmf.log_normalizer(dim, 1e-9) == pytest.approx(
                vmf.log_normalizer(dim, 0.0), abs=1e-12)

    def test_large_kappa_finite(self):
        assert np.isfinite(vmf.log_normalizer(512, 1e6))

    @pytest.mark.parametrize("bad", [(1, 1.0), (3, -1.0), (3, float("nan")), (3, float("inf"))])
    def test_domain_errors(self, bad):
        with pytest.raises(DomainError):
            vmf.log_normalizer(*bad)

    def test_array_input(self):
        k = np.array([0.0, 0.5, 5.0, 500.0])
        out = vmf.log_normalizer(3, k)
        assert out.shape == (4,)
        assert out[1] == pytest.approx(logc3(0.5), rel=1e-12)


class TestMeanResultant:
    def test_zero(self):
        assert vmf.mean_resultant(3, 0.0) == 0.0

    def test_closed_form_values(self):
        assert vmf.mean_resultant(3, 1.0) == pytest.approx(0.31303528549933146, rel=1e-14)
        assert vmf.mean_resultant(3, 0.01) == pytest.approx(0.0033333, rel=1e-4)
        assert vmf.mean_resultant(3, 0.01) == pytest.approx(0.01 / 3, rel=1e-4)

    def test_large_kappa_expansion(self):
        for dim in (3, 8, 128):
            k = 1e6
            assert 1 - vmf.mean_resultant(dim, k) == pytest.approx((dim - 1) / (2 * k), rel=1e-3)

    @pytest.mark.parametrize("dim", [2, 3, 8, 128, 512])
    def test_range_and_monotone(self, dim):
        k = np.logspace(-4, 6, 400)
        a = vmf.mean_resultant(dim, k)
        assert np.all(a >= 0) and np.all(a < 1)
        assert np.all(np.diff(a) > 0)


class TestEntropy:
    def test_values(self):
        assert vmf.entropy(3, 0.0) == pytest.approx(math.log(4 * math.pi), abs=1e-15)
        # 2.692464 - 0.313035
        assert vmf.entropy(3, 1.0) == pytest.approx(2.379428323041155, rel=1e-13)
        assert vmf.entropy(3, 1e4) == pytest.approx(1 + math.log(2 * math.pi / 1e4), abs=1e-6)

    @pytest.mark.parametrize("kappa", [0.01, 0.1, 1.0, 10.0, 100.0])
    def test_d3_oracle(self, kappa):
        assert vmf.entropy(3, kappa) == pytest.approx(-logc3(kappa) - kappa * a3(kappa), rel=1e-10)

    @pytest.mark.parametrize("dim", [2, 4, 8, 16, 64, 128, 512])
    @pytest.mark.parametrize("kappa", [1e-3, 0.5, 12.0, 80.0, 900.0, 5e4])
    def test_matches_mpmath(self, dim, kappa):
        nu = mpmath.mpf(dim) / 2 - 1
        k = mpmath.mpf(kappa)
        logc = nu * mpmath.log(k) - dim / 2 * mpmath.log(2 * mpmath.pi) - mpmath.log(
            mpmath.besseli(nu, k))
        ref = float(-logc - k * mp_ratio(nu, k))
        assert vmf.entropy(dim, kappa) == pytest.approx(ref, rel=1e-11, abs=1e-11)

    @pytest.mark.parametrize("dim", [2, 3, 8, 128])
    def test_monotone_and_limits(self, dim):
        k = np.logspace(-3, 4, 200)
        h = vmf.entropy(dim, k)
        assert np.all(np.diff(h) < 0)
        assert abs(vmf.entropy(dim, 1e-4) - vmf.log_sphere_volume(dim)) <= 1e-3

    @pytest.mark.parametrize("dim", [2, 3, 8])
    def test_large_kappa_asymptote(self, dim):
        asym = (dim - 1) / 2 * (1 + math.log(2 * math.pi / 1e4))
        assert abs(vmf.entropy(dim, 1e4) - asym) <= 0.01

    @given(st.integers(2, 300), st.floats(1e-3, 1e5), st.floats(1.001, 3.0))
    @settings(max_examples=200, deadline=None)
    def test_decreasing_property(self, dim, kappa, factor):
        assert vmf.entropy(dim, kappa * factor) < vmf.entropy(dim, kappa)

    @given(st.integers(2, 300), st.floats(0.0, 1e6))
    @settings(max_examples=200, deadline=None)
    def test_bounded_by_uniform(self, dim, kappa):
        assert vmf.entropy(dim, kappa) <= vmf.log_sphere_volume(dim) + 1e-12


class TestEntropyDerivative:
    def test_value_d3(self):
        a = a3(1.0)
        assert vmf.entropy_derivative(3, 1.0) == pytest.approx(-(1 - a * a - 2 * a), rel=1e-12)
        assert vmf.entropy_derivative(3, 1.0) == pytest.approx(-0.275938, abs=1e-6)

    @staticmethod
    def central_difference(dim, kappa):
        h = 1e-5 * max(1.0, kappa)
        return (vmf.entropy(dim, kappa + h) - vmf.entropy(dim, kappa - h)) / (2 * h)

    def test_finite_difference_d8(self):
        fd = self.central_difference(8, 5.0)
        assert vmf.entropy_derivative(8, 5.0) < 0
        assert vmf.entropy_derivative(8, 5.0) == pytest.approx(fd, rel=1e-5)

    def test_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            dim = int(rng.integers(2, 129))
            kappa = float(np.exp(rng.uniform(np.log(0.01), np.log(1000.0))))
            fd = self.central_difference(dim, kappa)
            assert vmf.entropy_derivative(dim, kappa) == pytest.approx(fd, rel=1e-5)

    def test_vanishes_at_uniform_limit(self):
        d = vmf.entropy_derivative(2, 1e-8)
        assert d < 0 and d > -1e-8

    def test_rejects_zero(self):
        with pytest.raises(DomainError):
            vmf.entropy_derivative(3, 0.0)

    def test_variance_identity(self):
        mu = np.array([0.0, 0.0, 1.0])
        s = vmf.sample(vmf.VmfBelief(mu, 2.0), 200_000, rng_seed=3)
        c = s @ mu
        se = c.var(ddof=1) * math.sqrt(2.0 / (c.size - 1))
        assert abs(vmf.log_partition_second_derivative(3, 2.0) - c.var(ddof=1)) <= 4 * se


class TestSampling:
    def test_unit_norm_and_determinism(self):
        b = vmf.VmfBelief(np.array([0.6, 0.8]), 3.0)
        s1 = vmf.sample(b, 1000, rng_seed=5)
        s2 = vmf.sample(b, 1000, rng_seed=5)
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_allclose(np.linalg.norm(s1, axis=1), 1.0, atol=1e-12)

    def test_uniform(self):
        mu = np.eye(4)[0]
        s = vmf.sample(vmf.VmfBelief(mu, 0.0), 100_000, rng_seed=1)
        assert vmf.mean_resultant_length(s) <= 0.01

    def test_mean_resultant_d3(self):
        s = vmf.sample(vmf.VmfBelief(np.array([1.0, 0.0, 0.0]), 1.0), 100_000, rng_seed=2)
        assert abs(vmf.mean_resultant_length(s) - 0.313035) <= 0.005

    def test_concentrated(self):
        mu = np.ones(5) / math.sqrt(5)
        s = vmf.sample(vmf.VmfBelief(mu, 1e6), 10, rng_seed=4)
        assert np.all(s @ mu >= 0.999)

    @pytest.mark.parametrize("dim,kappa", [(2, 4.0), (3, 0.5), (10, 25.0), (128, 300.0)])
    def test_mean_resultant_matches_theory(self, dim, kappa):
        mu = np.eye(dim)[-1]
        s = vmf.sample(vmf.VmfBelief(mu, kappa), 50_000, rng_seed=dim)
        c = s @ mu
        se = c.std() / math.sqrt(c.size)
        assert abs(c.mean() - vmf.mean_resultant(dim, kappa)) <= 5 * se

    def test_belief_validation(self):
        with pytest.raises(DomainError):
            vmf.VmfBelief(np.array([1.0, 1.0]), 1.0)
        with pytest.raises(DomainError):
            vmf.VmfBelief(np.array([1.0, 0.0]), -1.0)
        with pytest.raises(DomainError):
            vmf.VmfBelief(np.array([1.0]), 1.0)


class TestFitKappa:
    def test_newton_solution_d3(self):
        k = vmf._solve_kappa(3, 0.5)
        assert a3(k) == pytest.approx(0.5, abs=1e-10)
        assert k == pytest.approx(1.7968, abs=1e-4)

    def test_zero_resultant(self):
        x = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        assert vmf.fit_kappa(x) == 0.0

    def test_round_trip(self):
        s = vmf.sample(vmf.VmfBelief(np.array([0.0, 1.0, 0.0]), 1.0), 100_000, rng_seed=9)
        assert abs(vmf.fit_kappa(s) - 1.0) <= 0.05

    @pytest.mark.parametrize("dim,kappa", [(2, 0.3), (8, 40.0), (64, 500.0)])
    def test_inverse_of_mean_resultant(self, dim, kappa):
        rbar = vmf.mean_resultant(dim, kappa)
        assert vmf._solve_kappa(dim, rbar) == pytest.approx(kappa, rel=1e-8)

    def test_saturation(self):
        x = np.tile([0.0, 0.0, 1.0], (5, 1))
        with pytest.raises(SaturationError):
            vmf.fit_kappa(x)

    def test_needs_two_samples(self):
        with pytest.raises(DomainError):
            vmf.fit_kappa(np.array([[1.0, 0.0]]))
