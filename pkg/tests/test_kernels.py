"""Kernel-level tests against brute-force index oracles."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fslmm import kernels as kn


def brute_vec(a):
    """Index-loop oracle for vec."""
    r, c = a.shape
    out = np.empty(r * c)
    for j in range(c):
        for i in range(r):
            out[j * r + i] = a[i, j]
    return out


def brute_duplication(k):
    """Build D_k from its defining relation applied to basis half-vectors."""
    m = k * (k + 1) // 2
    out = np.zeros((k * k, m))
    for pos in range(m):
        e = np.zeros(m)
        e[pos] = 1.0
        out[:, pos] = brute_vec(kn.unvech(e))
    return out


def brute_commutation(m, n):
    """Build K_mn column by column from vec(A) = K vec(A')."""
    out = np.zeros((m * n, m * n))
    for j in range(n):
        for i in range(m):
            a = np.zeros((m, n))
            a[i, j] = 1.0
            out[:, np.flatnonzero(brute_vec(a.T))[0]] = brute_vec(a)
    return out


class TestVecVech:
    def test_vec_2x2(self):
        npt.assert_array_equal(kn.vec(np.array([[1, 2], [3, 4]])), [1, 3, 2, 4])

    def test_vec_identity(self):
        npt.assert_array_equal(kn.vec(np.eye(2)), [1, 0, 0, 1])

    def test_vec_matches_index_scan(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        npt.assert_array_equal(kn.vec(a), brute_vec(a))

    def test_vech_2x2(self):
        npt.assert_array_equal(kn.vech(np.array([[1, 2], [2, 3]])), [1, 2, 3])

    def test_vech_identity3(self):
        npt.assert_array_equal(kn.vech(np.eye(3)), [1, 0, 0, 1, 0, 1])

    def test_vech_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            kn.vech(np.zeros((2, 3)))

    def test_duplication_recovers_vec_random_symmetric(self):
        rng = np.random.default_rng(1)
        d4 = brute_duplication(4)
        s = rng.normal(size=(4, 4))
        s = s + s.T
        npt.assert_allclose(d4 @ kn.vech(s), kn.vec(s), rtol=0, atol=0)

    @given(st.integers(min_value=1, max_value=6))
    def test_unvech_roundtrip(self, k):
        rng = np.random.default_rng(k)
        s = rng.normal(size=(k, k))
        s = s + s.T
        npt.assert_array_equal(kn.unvech(kn.vech(s)), s)

    def test_unvech_lower(self):
        lam = np.array([[1.0, 0.0], [2.0, 3.0]])
        npt.assert_array_equal(kn.unvech_lower(kn.vech(lam)), lam)


class TestStructureMatrices:
    def test_duplication_k1(self):
        npt.assert_array_equal(kn.duplication_matrix(1), [[1.0]])

    def test_duplication_k2_rows(self):
        expected = np.array(
            [[1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1]], dtype=float
        )
        npt.assert_array_equal(kn.duplication_matrix(2), expected)

    def test_duplication_defining_relation_k3(self):
        rng = np.random.default_rng(2)
        d3 = kn.duplication_matrix(3)
        for _ in range(20):
            s = rng.normal(size=(3, 3))
            s = s + s.T
            npt.assert_allclose(d3 @ kn.vech(s), kn.vec(s))

    def test_elimination_k1(self):
        npt.assert_array_equal(kn.elimination_matrix(1), [[1.0]])

    def test_elimination_k2_lower_triangular(self):
        lam = np.array([[5.0, 0.0], [7.0, 9.0]])
        npt.assert_array_equal(kn.elimination_matrix(2) @ kn.vec(lam), [5, 7, 9])

    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_elimination_times_duplication_is_identity(self, k):
        m = k * (k + 1) // 2
        npt.assert_allclose(
            kn.elimination_matrix(k) @ kn.duplication_matrix(k), np.eye(m)
        )

    def test_commutation_11_identity(self):
        npt.assert_array_equal(kn.commutation_indices(1, 1), [0])

    def test_commutation_22_permutes(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = kn.commutation_indices(2, 2)
        npt.assert_array_equal(kn.vec(a.T)[g], kn.vec(a))

    def test_commutation_defining_relation_3x5(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 5))
        g = kn.commutation_indices(3, 5)
        npt.assert_array_equal(kn.vec(a.T)[g], kn.vec(a))
        npt.assert_allclose(kn.commutation_matrix(3, 5), brute_commutation(3, 5))

    @given(st.integers(1, 5), st.integers(1, 5))
    @settings(deadline=None)
    def test_commutation_double_application_is_identity(self, m, n):
        rng = np.random.default_rng(m * 7 + n)
        a = rng.normal(size=(m, n))
        v = kn.vec(a)
        back = v[kn.commutation_indices(n, m)][kn.commutation_indices(m, n)]
        npt.assert_array_equal(back, v)

    def test_symmetrizer_k1(self):
        npt.assert_array_equal(kn.symmetrizer_matrix(1), [[1.0]])

    def test_symmetrizer_fixes_symmetric(self):
        rng = np.random.default_rng(4)
        s = rng.normal(size=(3, 3))
        s = s + s.T
        npt.assert_allclose(kn.symmetrizer_matrix(3) @ kn.vec(s), kn.vec(s))

    @pytest.mark.parametrize("k", [2, 3])
    def test_symmetrizer_idempotent_with_expected_rank(self, k):
        n = kn.symmetrizer_matrix(k)
        npt.assert_allclose(n @ n, n, atol=1e-14)
        eigvals = np.linalg.eigvalsh(n)
        assert int(np.sum(eigvals > 0.5)) == k * (k + 1) // 2

    def test_symmetrizer_action_on_vec(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(4, 4))
        npt.assert_allclose(
            kn.symmetrizer_matrix(4) @ kn.vec(a), kn.vec(a + a.T) / 2
        )

    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_symmetrizer_absorbs_duplication(self, k):
        d = kn.duplication_matrix(k)
        npt.assert_allclose(kn.symmetrizer_matrix(k) @ d, d, atol=1e-14)

    def test_symmetrizer_commutes_with_kron_square(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 3))
        lhs = np.kron(a, a) @ kn.symmetrizer_matrix(3)
        rhs = kn.symmetrizer_matrix(4) @ np.kron(a, a)
        npt.assert_allclose(lhs, rhs, atol=1e-12)

    def test_symmetrize_columns_matches_dense(self):
        rng = np.random.default_rng(7)
        m = rng.normal(size=(5, 9))
        npt.assert_allclose(
            kn.symmetrize_columns(m, 3), m @ kn.symmetrizer_matrix(3)
        )


class TestVecM:
    def test_single_block_unchanged(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=(3, 4))
        npt.assert_array_equal(kn.vec_m(m, 4), m)

    def test_1x4_into_two_blocks(self):
        npt.assert_array_equal(
            kn.vec_m(np.array([[1.0, 2.0, 3.0, 4.0]]), 2), [[1, 2], [3, 4]]
        )

    def test_sum_of_outer_products_identity(self):
        rng = np.random.default_rng(9)
        m1, m2, blocks = 3, 2, 5
        a = rng.normal(size=(m1, m2 * blocks))
        b = rng.normal(size=(m1, m2 * blocks))
        expected = np.zeros((m1, m1))
        for i in range(blocks):
            expected += a[:, i * m2 : (i + 1) * m2] @ b[:, i * m2 : (i + 1) * m2].T
        got = kn.vec_m(a.T, m1).T @ kn.vec_m(b.T, m1)
        npt.assert_allclose(got, expected, rtol=1e-12)

    def test_divisibility_violation(self):
        with pytest.raises(ValueError):
            kn.vec_m(np.zeros((2, 5)), 2)


class TestKronBlockSum:
    def test_scalar_blocks(self):
        g = np.array([[3.0]])
        h = np.array([[4.0]])
        npt.assert_allclose(kn.kron_block_sum(g, h, (1, 1)), [[12.0]])

    def test_identity_single_block(self):
        got = kn.kron_block_sum(np.eye(2), np.eye(2), (2, 2))
        npt.assert_allclose(got, np.kron(np.eye(2), np.eye(2)))

    def test_random_grid_matches_loop_oracle(self):
        rng = np.random.default_rng(10)
        n1, n2, c1, c2 = 2, 2, 3, 2
        g = rng.normal(size=(c1 * n1, c2 * n2))
        h = rng.normal(size=(c1 * n1, c2 * n2))
        expected = np.zeros((n1 * n1, n2 * n2))
        for i in range(c1):
            for j in range(c2):
                gb = g[i * n1 : (i + 1) * n1, j * n2 : (j + 1) * n2]
                hb = h[i * n1 : (i + 1) * n1, j * n2 : (j + 1) * n2]
                expected += np.kron(gb, hb)
        npt.assert_allclose(kn.kron_block_sum(g, h, (n1, n2)), expected, rtol=1e-12)

    def test_rectangular_blocks_match_loop_oracle(self):
        rng = np.random.default_rng(11)
        n1, n2, c1, c2 = 3, 2, 4, 5
        g = rng.normal(size=(c1 * n1, c2 * n2))
        h = rng.normal(size=(c1 * n1, c2 * n2))
        expected = np.zeros((n1 * n1, n2 * n2))
        for i in range(c1):
            for j in range(c2):
                gb = g[i * n1 : (i + 1) * n1, j * n2 : (j + 1) * n2]
                hb = h[i * n1 : (i + 1) * n1, j * n2 : (j + 1) * n2]
                expected += np.kron(gb, hb)
        npt.assert_allclose(kn.kron_block_sum(g, h, (n1, n2)), expected, rtol=1e-12)

    def test_partition_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kn.kron_block_sum(np.zeros((4, 4)), np.zeros((4, 6)), (2, 2))
        with pytest.raises(ValueError):
            kn.kron_block_sum(np.zeros((5, 4)), np.zeros((5, 4)), (2, 2))

    def test_mix_permutation_matches_dense_kron(self):
        n1, n2 = 3, 2
        dense = np.kron(
            np.eye(n2), np.kron(kn.commutation_matrix(n1, n2), np.eye(n1))
        )
        v = np.arange((n1 * n2) ** 2, dtype=float)
        npt.assert_array_equal(v[kn._kron_mix_indices(n1, n2)], dense @ v)


class TestProjectPsd:
    def test_fixed_point_for_psd(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(4, 4))
        s = a @ a.T
        npt.assert_allclose(kn.project_psd(s), s, atol=1e-10)

    def test_clamps_negative_eigenvalue(self):
        npt.assert_allclose(
            kn.project_psd(np.diag([-1.0, 2.0])), np.diag([0.0, 2.0]), atol=1e-14
        )

    def test_output_nonnegative_definite(self):
        rng = np.random.default_rng(13)
        s = rng.normal(size=(5, 5))
        s = s + s.T
        out = kn.project_psd(s)
        assert np.linalg.eigvalsh(out).min() >= -1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(14)
        s = rng.normal(size=(5, 5))
        s = s + s.T
        once = kn.project_psd(s)
        npt.assert_allclose(kn.project_psd(once), once, atol=1e-12)

    def test_matches_direct_eigen_clamp(self):
        rng = np.random.default_rng(15)
        s = rng.normal(size=(4, 4))
        s = s + s.T
        w, u = np.linalg.eigh(s)
        direct = u @ np.diag(np.maximum(w, 0.0)) @ u.T
        npt.assert_allclose(kn.project_psd(s), direct, atol=1e-12)


class TestPseudoInverse:
    def penrose_conditions(self, a, ap):
        npt.assert_allclose(a @ ap @ a, a, atol=1e-8)
        npt.assert_allclose(ap @ a @ ap, ap, atol=1e-8)
        npt.assert_allclose((a @ ap).T, a @ ap, atol=1e-8)
        npt.assert_allclose((ap @ a).T, ap @ a, atol=1e-8)

    def test_invertible_case(self):
        rng = np.random.default_rng(16)
        a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        npt.assert_allclose(kn.pseudo_inverse(a), np.linalg.inv(a), rtol=1e-8)

    def test_zero_matrix(self):
        npt.assert_array_equal(kn.pseudo_inverse(np.zeros((2, 3))), np.zeros((3, 2)))

    def test_symmetrizer_pseudo_inverse_penrose(self):
        n2 = kn.symmetrizer_matrix(2)
        self.penrose_conditions(np.asarray(n2), kn.pseudo_inverse(n2))
