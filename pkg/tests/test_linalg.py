import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ckfnet.linalg import (
    NotPositiveDefinite,
    SpdFactor,
    chol_backward,
    chol_lower,
    cholesky,
    factor_solve,
    jacobi_eigen,
    spd_perturb,
    spd_solve,
)

from conftest import random_spd, spd_matrices


class TestCholesky:
    def test_identity(self):
        f = cholesky(np.eye(4))
        np.testing.assert_array_equal(f.lower, np.eye(4))

    def test_reconstructs(self):
        P = np.array([[4.0, 2.0], [2.0, 3.0]])
        f = cholesky(P)
        np.testing.assert_allclose(f.lower @ f.lower.T, P, atol=1e-12)
        assert f.lower[0, 1] == 0.0

    def test_indefinite_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            cholesky(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_factor_is_read_only(self):
        f = cholesky(np.eye(2))
        with pytest.raises(ValueError):
            f.lower[0, 0] = 3.0

    def test_factor_rejects_upper_entries(self):
        with pytest.raises(ValueError):
            SpdFactor(np.array([[1.0, 0.5], [0.0, 1.0]]))

    @given(spd_matrices())
    def test_property_reconstruction(self, P):
        L = cholesky(P).lower
        assert np.all(np.diag(L) > 0)
        np.testing.assert_allclose(L @ L.T, P, atol=1e-9 * np.abs(P).max())

    def test_batched_matches_single(self, rng):
        Ps = np.stack([random_spd(rng, 3) for _ in range(5)])
        Ls = chol_lower(Ps)
        for P, L in zip(Ps, Ls):
            np.testing.assert_allclose(L, np.linalg.cholesky(P), atol=1e-12)


class TestSolve:
    def test_identity(self, rng):
        B = rng.normal(size=(3, 2))
        np.testing.assert_allclose(spd_solve(np.eye(3), B), B, atol=1e-15)

    def test_diagonal_scaling(self):
        X = spd_solve(np.diag([2.0, 2.0]), np.array([[4.0], [6.0]]))
        np.testing.assert_allclose(X, [[2.0], [3.0]], atol=1e-15)

    def test_residual(self, rng):
        P = random_spd(rng, 4)
        X = spd_solve(P, np.eye(4))
        np.testing.assert_allclose(P @ X, np.eye(4), atol=1e-8)

    def test_vector_rhs(self, rng):
        P = random_spd(rng, 3)
        b = rng.normal(size=3)
        x = spd_solve(P, b)
        assert x.shape == (3,)
        np.testing.assert_allclose(P @ x, b, atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            spd_solve(np.eye(3), np.ones((2, 1)))

    @given(spd_matrices(), st.integers(1, 3))
    def test_property_factor_solve(self, P, k):
        L = chol_lower(P)
        B = np.arange(P.shape[0] * k, dtype=float).reshape(P.shape[0], k)
        X = factor_solve(L, B)
        np.testing.assert_allclose(P @ X, B, atol=1e-7 * (1 + np.abs(B).max()) * np.linalg.cond(P))


class TestJacobi:
    def test_already_diagonal(self):
        vals, vecs = jacobi_eigen(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(vals, [3.0, 1.0])
        np.testing.assert_allclose(np.abs(vecs), np.eye(2))

    def test_two_by_two(self):
        vals, _ = jacobi_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(vals, [3.0, 1.0], atol=1e-12)

    def test_scaled_identity(self):
        vals, _ = jacobi_eigen(0.1 * np.eye(4))
        np.testing.assert_allclose(vals, 0.1, atol=1e-15)

    @given(spd_matrices())
    def test_property_decomposition(self, P):
        vals, vecs = jacobi_eigen(P)
        assert np.all(np.diff(vals) <= 1e-12)
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(len(vals)), atol=1e-10)
        np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, P, atol=1e-9 * np.abs(P).max())
        np.testing.assert_allclose(vals, np.linalg.eigvalsh(P)[::-1], atol=1e-9 * np.abs(P).max())


class TestPerturb:
    def test_uniform_scaling(self):
        np.testing.assert_allclose(spd_perturb(0.1 * np.eye(4), [1.2] * 4), 0.12 * np.eye(4), atol=1e-15)

    def test_unit_factors(self):
        P = 0.1 * np.eye(4)
        np.testing.assert_allclose(spd_perturb(P, [1.0] * 4), P, atol=1e-12)

    def test_eigenvalues_scaled(self):
        out = spd_perturb(np.array([[2.0, 1.0], [1.0, 2.0]]), [1.1, 0.9])
        np.testing.assert_array_equal(out, out.T)
        np.testing.assert_allclose(np.linalg.eigvalsh(out)[::-1], [3.3, 0.9], atol=1e-12)

    def test_factor_range(self):
        with pytest.raises(ValueError):
            spd_perturb(np.eye(2), [1.3, 1.0])

    @given(spd_matrices(), st.data())
    def test_property_stays_spd(self, P, data):
        n = P.shape[0]
        factors = data.draw(st.lists(st.floats(0.8, 1.2), min_size=n, max_size=n))
        out = spd_perturb(P, factors)
        np.testing.assert_array_equal(out, out.T)
        cholesky(out)


def test_chol_backward_matches_finite_differences(rng):
    P = random_spd(rng, 3)
    G = np.tril(rng.normal(size=(3, 3)))

    def loss(A):
        return float(np.sum(G * chol_lower(A)))

    analytic = chol_backward(chol_lower(P), G)
    h = 1e-6
    numeric = np.zeros_like(P)
    for i in range(3):
        for j in range(i + 1):
            E = np.zeros_like(P)
            E[i, j] = E[j, i] = h
            d = (loss(P + E) - loss(P - E)) / (2 * h)
            # a symmetric perturbation of an off-diagonal pair moves both entries
            numeric[i, j] = numeric[j, i] = d if i == j else d / 2
    np.testing.assert_allclose(analytic, numeric, atol=1e-7)


def test_only_lower_triangle_is_read():
    P = np.array([[4.0, 2.0], [2.0, 3.0]])
    garbage = P.copy()
    garbage[0, 1] = 1e9
    np.testing.assert_array_equal(chol_lower(garbage), chol_lower(P))


def test_tiny_pivot_rejected():
    with pytest.raises(NotPositiveDefinite):
        chol_lower(np.diag([1.0, 1e-13]))
