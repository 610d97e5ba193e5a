"""Pointwise constitutive laws: frozen values, derivative oracles, bounds."""

import numpy as np
import pytest

from pstokes.kernels import PowerLaw, j_density, s_apply, s_derivative


def frob(P):
    return float(np.sqrt(np.sum(P * P)))


class TestPowerLaw:
    def test_validation(self):
        with pytest.raises(ValueError):
            PowerLaw(1.0, 0.1)
        with pytest.raises(ValueError):
            PowerLaw(2.5, 0.1)
        with pytest.raises(ValueError):
            PowerLaw(1.5, -1.0)
        assert PowerLaw(2.0, 0.0).norm_scale == 1.0
        assert PowerLaw(1.5, 0.0, half_factor=True).norm_scale == 0.5


class TestSApply:
    def test_exponent_two_is_identity(self):
        law = PowerLaw(2.0, 0.5)
        P = np.array([[1.0, 2.0], [-3.0, 0.5]])
        assert np.array_equal(s_apply(law, P), P)

    def test_zero_input(self):
        law = PowerLaw(4.0 / 3.0, 1.0)
        assert np.array_equal(s_apply(law, np.zeros((2, 2))), np.zeros((2, 2)))

    def test_identity_matrix_value(self):
        # (|I|^2 + 1)^(-1/3) = 3^(-1/3), evaluated directly
        law = PowerLaw(4.0 / 3.0, 1.0)
        got = s_apply(law, np.eye(2))
        assert np.allclose(got, 3.0 ** (-1.0 / 3.0) * np.eye(2), rtol=1e-15)
        assert abs(got[0, 0] - 0.6933612743506347) < 1e-12

    def test_half_factor_identity_matrix(self):
        # (0.5*2 + 1)^(-1/3) = 2^(-1/3)
        law = PowerLaw(4.0 / 3.0, 1.0, half_factor=True)
        got = s_apply(law, np.eye(2))
        assert np.allclose(got, 2.0 ** (-1.0 / 3.0) * np.eye(2), rtol=1e-15)

    def test_vector_argument(self):
        law = PowerLaw(1.5, 0.5)
        v = np.array([3.0, -4.0])
        want = (25.0 + 0.25) ** (-0.25) * v
        assert np.allclose(s_apply(law, v), want, rtol=1e-15)

    def test_singular_limit_is_zero(self):
        law = PowerLaw(1.5, 0.0)
        assert np.array_equal(s_apply(law, np.zeros(2)), np.zeros(2))

    def test_rejects_non_finite(self):
        law = PowerLaw(1.5, 0.5)
        with pytest.raises(ValueError):
            s_apply(law, np.array([np.nan, 1.0]))
        with pytest.raises(ValueError):
            s_apply(law, np.array([[np.inf, 0.0], [0.0, 0.0]]))

    def test_norm_bounds(self):
        # |S(P)| <= delta^(r-2) |P|, and <= |P|^(r-1) when delta = 0
        rng = np.random.default_rng(0)
        for _ in range(200):
            P = rng.uniform(-10, 10, (2, 2))
            r = rng.uniform(1.05, 2.0)
            delta = rng.choice([1e-3, 0.5, 2.0])
            law = PowerLaw(r, delta)
            assert frob(s_apply(law, P)) <= delta ** (r - 2.0) * frob(P) * (1 + 1e-12)
            law0 = PowerLaw(r, 0.0)
            assert frob(s_apply(law0, P)) <= frob(P) ** (r - 1.0) * (1 + 1e-12)


class TestSDerivative:
    def test_zero_point_is_isotropic(self):
        # P = 0, delta = 1, r = 4/3: coefficient delta^(r-2) = 1, so dS = id
        law = PowerLaw(4.0 / 3.0, 1.0)
        T = s_derivative(law, np.zeros((2, 2)))
        Q = np.array([[1.0, -2.0], [0.5, 3.0]])
        assert np.allclose(np.einsum("ijkl,kl->ij", T, Q), Q, rtol=1e-15)

    def test_singular_point_raises(self):
        law = PowerLaw(1.5, 0.0)
        with pytest.raises(ValueError):
            s_derivative(law, np.zeros((2, 2)))

    @pytest.mark.parametrize("half", [False, True])
    def test_matches_finite_differences(self, half):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r = rng.uniform(1.1, 2.0)
            law = PowerLaw(r, rng.uniform(0.2, 1.5), half_factor=half)
            P = rng.standard_normal((2, 2))
            Q = rng.standard_normal((2, 2))
            T = s_derivative(law, P)
            action = np.einsum("ijkl,kl->ij", T, Q)
            for eps in (1e-4, 1e-5, 1e-6):
                fd = (s_apply(law, P + eps * Q) - s_apply(law, P - eps * Q)) / (2 * eps)
                err = np.abs(fd - action).max() / max(np.abs(action).max(), 1e-300)
                assert err < 1e-6

    def test_vector_jacobian(self):
        law = PowerLaw(1.5, 0.4)
        v = np.array([0.7, -1.1])
        M = s_derivative(law, v)
        eps = 1e-6
        for q in (np.array([1.0, 0.0]), np.array([0.3, -0.9])):
            fd = (s_apply(law, v + eps * q) - s_apply(law, v - eps * q)) / (2 * eps)
            assert np.allclose(M @ q, fd, rtol=1e-7)

    def test_symmetry_of_bilinear_action(self):
        rng = np.random.default_rng(2)
        law = PowerLaw(4.0 / 3.0, 0.8)
        for _ in range(50):
            P, Q1, Q2 = rng.standard_normal((3, 2, 2))
            T = s_derivative(law, P)
            a = np.einsum("ijkl,kl,ij->", T, Q1, Q2)
            b = np.einsum("ijkl,kl,ij->", T, Q2, Q1)
            assert abs(a - b) <= 1e-12 * max(abs(a), 1.0)

    def test_coercivity_lower_bound(self):
        # <dS(P)Q, Q> >= (r-1)(|P|^2+delta^2)^((r-2)/2) |Q|^2
        rng = np.random.default_rng(3)
        for _ in range(300):
            r = rng.uniform(1.05, 2.0)
            delta = rng.choice([1e-3, 1.0])
            law = PowerLaw(r, delta)
            P, Q = rng.uniform(-10, 10, (2, 2, 2))
            T = s_derivative(law, P)
            lhs = np.einsum("ijkl,kl,ij->", T, Q, Q)
            rhs = (r - 1.0) * (frob(P) ** 2 + delta**2) ** ((r - 2.0) / 2.0) * frob(Q) ** 2
            assert lhs >= rhs - 1e-10 * abs(rhs)


class TestMonotonicityAndLipschitz:
    def test_monotonicity_with_quantitative_bound(self):
        # (S(P)-S(Q)):(P-Q) >= (r-1)(delta+|P|+|Q|)^(r-2) |P-Q|^2
        rng = np.random.default_rng(4)
        for delta in (1e-3, 1.0):
            for _ in range(500):
                r = rng.uniform(1.05, 2.0)
                law = PowerLaw(r, delta)
                P, Q = rng.uniform(-10, 10, (2, 2, 2))
                diff2 = float(np.sum((P - Q) ** 2))
                if diff2 == 0.0:
                    continue
                lhs = float(np.sum((s_apply(law, P) - s_apply(law, Q)) * (P - Q)))
                assert lhs > 0.0
                rhs = (r - 1.0) * (delta + frob(P) + frob(Q)) ** (r - 2.0) * diff2
                assert lhs >= rhs * (1 - 1e-10)

    def test_lipschitz_bound(self):
        # |S(P)-S(Q)| <= 5 (delta+|P|+|Q|)^(r-2) |P-Q|
        rng = np.random.default_rng(5)
        for delta in (1e-3, 1.0):
            for _ in range(500):
                r = rng.uniform(1.05, 2.0)
                law = PowerLaw(r, delta)
                P, Q = rng.uniform(-10, 10, (2, 2, 2))
                lhs = frob(s_apply(law, P) - s_apply(law, Q))
                rhs = 5.0 * (delta + frob(P) + frob(Q)) ** (r - 2.0) * frob(P - Q)
                assert lhs <= rhs * (1 + 1e-12)


class TestJDensity:
    def test_zero_point_value(self):
        # delta^r / r at P = 0: r = 4/3, delta = 1 -> 3/4
        law = PowerLaw(4.0 / 3.0, 1.0)
        assert j_density(law, 1.0, np.zeros((2, 2))) == pytest.approx(0.75, rel=1e-15)

    def test_quadratic_case(self):
        # r = 2, delta = 0, scale = 2, |P|^2 = 5 -> (2/2)*5 = 5
        law = PowerLaw(2.0, 0.0)
        P = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert j_density(law, 2.0, P) == pytest.approx(5.0, rel=1e-15)

    def test_rejects_negative_scale(self):
        with pytest.raises(ValueError):
            j_density(PowerLaw(1.5, 0.1), -1.0, np.zeros(2))

    @pytest.mark.parametrize("half", [False, True])
    def test_gradient_matches_s_apply(self, half):
        # Richardson-extrapolated central differences of the density against
        # scale * s_apply(P):Q
        rng = np.random.default_rng(6)
        for _ in range(30):
            r = rng.uniform(1.1, 2.0)
            law = PowerLaw(r, rng.uniform(0.3, 1.5), half_factor=half)
            scale = rng.uniform(0.5, 3.0)
            P, Q = rng.standard_normal((2, 2, 2))

            def diff(eps):
                return (j_density(law, scale, P + eps * Q) - j_density(law, scale, P - eps * Q)) / (2 * eps)

            eps = 1e-4
            richardson = (4.0 * diff(eps / 2) - diff(eps)) / 3.0
            want = scale * float(np.sum(s_apply(law, P) * Q))
            assert richardson == pytest.approx(want, rel=1e-6)
