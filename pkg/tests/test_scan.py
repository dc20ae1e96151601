"""Scan engine tests: frozen examples, oracle equivalence, determinism."""

import numpy as np
import pytest

from hypr.errors import ConfigError
from hypr.scan import (
    combine_pairs,
    finite_difference_jacobian,
    matk_mul,
    reverse_scan_q,
    scan_matprod_suffix,
)

from oracle_helpers import rel_error, seq_backward_coeffs, seq_suffix_products


class TestMatkMul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(matk_mul(np.eye(3), a), a)

    def test_scalar_diagonal(self):
        out = matk_mul(0.5 * np.eye(2), 0.5 * np.eye(2))
        np.testing.assert_allclose(out, 0.25 * np.eye(2), rtol=0, atol=0)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        ref = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for l in range(3):
                    ref[i, j] += a[i, l] * b[l, j]
        np.testing.assert_allclose(matk_mul(a, b), ref, rtol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            matk_mul(np.eye(2), np.eye(3))
        with pytest.raises(ConfigError):
            matk_mul(np.eye(5), np.eye(5))


class TestSuffixProducts:
    def test_identities(self):
        a = np.broadcast_to(np.eye(2), (4, 2, 2)).copy()
        out = scan_matprod_suffix(a)
        np.testing.assert_array_equal(out, a)

    def test_scalar_chain(self):
        a = np.full((3, 1, 1), 0.5)
        out = scan_matprod_suffix(a)
        np.testing.assert_allclose(out[:, 0, 0], [0.125, 0.25, 0.5], rtol=1e-15)

    def test_matches_sequential_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(16, 2, 2)) * 0.9
        out = scan_matprod_suffix(a)
        ref = seq_suffix_products(a)
        assert rel_error(out, ref) < 1e-12

    def test_empty_input(self):
        out = scan_matprod_suffix(np.zeros((0, 2, 2)))
        assert out.shape == (0, 2, 2)

    def test_batched_middle_axes(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(8, 5, 3, 3)) * 0.7
        out = scan_matprod_suffix(a)
        for n in range(5):
            ref = seq_suffix_products(np.ascontiguousarray(a[:, n]))
            assert rel_error(out[:, n], ref) < 1e-12


class TestReverseScanQ:
    def test_zero_transitions(self):
        rng = np.random.default_rng(4)
        lam, k = 5, 3
        a = np.zeros((lam, k, k))
        ell = rng.normal(size=(lam, k))
        q = reverse_scan_q(a, ell)
        np.testing.assert_array_equal(q[1:], ell)
        np.testing.assert_array_equal(q[0], np.zeros(k))

    def test_hand_recursion(self):
        a = np.full((2, 1, 1), 0.5)
        ell = np.ones((2, 1))
        q = reverse_scan_q(a, ell)
        np.testing.assert_allclose(q[:, 0], [0.75, 1.5, 1.0], rtol=1e-15)

    def test_matches_sequential_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(32, 3, 3)) * 0.8
        ell = rng.normal(size=(32, 3))
        q = reverse_scan_q(a, ell)
        ref = seq_backward_coeffs(a, ell)
        assert rel_error(q, ref) < 1e-12

    def test_single_step(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(1, 3, 3))
        ell = rng.normal(size=(1, 3))
        q = reverse_scan_q(a, ell)
        np.testing.assert_array_equal(q[1], ell[0])
        np.testing.assert_allclose(q[0], ell[0] @ a[0], rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            reverse_scan_q(np.zeros((4, 2, 2)), np.zeros((4, 3)))


class TestOperatorProperties:
    def test_associativity_random_triples(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            k = int(rng.integers(1, 4))
            pairs = [
                (rng.normal(size=(k, k)), rng.normal(size=k)) for _ in range(3)
            ]
            a, b, c = pairs
            left = combine_pairs(combine_pairs(a, b), c)
            right = combine_pairs(a, combine_pairs(b, c))
            assert np.max(np.abs(left[0] - right[0])) < 1e-12
            assert np.max(np.abs(left[1] - right[1])) < 1e-12

    def test_identity_pair_neutral(self):
        rng = np.random.default_rng(8)
        k = 3
        p = (rng.normal(size=(k, k)), rng.normal(size=k))
        ident = (np.eye(k), np.zeros(k))
        for combo in (combine_pairs(ident, p), combine_pairs(p, ident)):
            np.testing.assert_allclose(combo[0], p[0], rtol=0, atol=0)
            np.testing.assert_allclose(combo[1], p[1], rtol=0, atol=0)


class TestDeterminism:
    def test_bitwise_across_worker_counts(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(21, 7, 3, 3)) * 0.9
        ell = rng.normal(size=(21, 7, 3))
        base_phi = scan_matprod_suffix(a, workers=1)
        base_q = reverse_scan_q(a, ell, workers=1)
        for workers in (2, 8):
            np.testing.assert_array_equal(
                scan_matprod_suffix(a, workers=workers), base_phi
            )
            np.testing.assert_array_equal(
                reverse_scan_q(a, ell, workers=workers), base_q
            )

    def test_bitwise_across_runs(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(13, 4, 2, 2))
        np.testing.assert_array_equal(
            scan_matprod_suffix(a), scan_matprod_suffix(a)
        )


class TestFiniteDifferenceJacobian:
    def test_identity_map(self):
        jac = finite_difference_jacobian(lambda x: x, np.zeros(3))
        np.testing.assert_allclose(jac, np.eye(3), atol=1e-10)

    def test_square(self):
        jac = finite_difference_jacobian(lambda x: x**2, np.array([2.0]), h=1e-5)
        np.testing.assert_allclose(jac[0, 0], 4.0, atol=1e-8)

    def test_nonfinite_raises(self):
        from hypr.errors import NumericError

        def bad(x):
            return np.array([np.inf])

        with pytest.raises(NumericError):
            finite_difference_jacobian(bad, np.zeros(1))

    def test_bad_step(self):
        with pytest.raises(ConfigError):
            finite_difference_jacobian(lambda x: x, np.zeros(1), h=0.0)
