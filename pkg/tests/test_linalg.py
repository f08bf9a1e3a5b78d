from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from clothsim.errors import DimensionMismatch, NotPositiveDefinite, SingularMatrix
from clothsim.sparse import (
    SparseMatrix,
    factorize_spd,
    solve_general,
    solve_prefactorized,
)


def random_spd(n: int, rng) -> np.ndarray:
    B = rng.standard_normal((n, n))
    return B.T @ B + np.eye(n)


def test_builder_sums_duplicates():
    A = SparseMatrix(2, 2)
    A.add([0, 0, 1], [0, 0, 1], [1.0, 2.0, 5.0])
    dense = A.toarray()
    assert dense[0, 0] == 3.0
    assert dense[1, 1] == 5.0


def test_builder_bounds_checked():
    A = SparseMatrix(2, 2)
    with pytest.raises(IndexError):
        A.add([2], [0], [1.0])
    with pytest.raises(IndexError):
        A.add([0], [-1], [1.0])


def test_factorize_identity():
    F = factorize_spd(np.eye(3))
    b = np.array([1.0, -2.0, 3.0])
    assert np.allclose(solve_prefactorized(F, b), b)


def test_factorize_diagonal():
    F = factorize_spd(np.diag([2.0, 4.0, 8.0]))
    x = solve_prefactorized(F, np.array([2.0, 4.0, 8.0]))
    assert np.allclose(x, [1.0, 1.0, 1.0])


def test_factorize_matches_dense_oracle():
    rng = np.random.default_rng(0)
    A = random_spd(50, rng)
    b = rng.standard_normal(50)
    x = solve_prefactorized(factorize_spd(A), b)
    x_ref = np.linalg.solve(A, b)  # dense Gaussian elimination oracle
    assert np.max(np.abs(x - x_ref)) <= 1e-9


def test_solve_accuracy_invariant():
    rng = np.random.default_rng(1)
    A = random_spd(40, rng)
    F = factorize_spd(A)
    for _ in range(5):
        b = rng.standard_normal(40)
        x = F.solve(b)
        assert np.max(np.abs(A @ x - b)) <= 1e-10 * (1 + np.max(np.abs(b)))


def test_prefactorized_zero_rhs():
    F = factorize_spd(np.eye(4))
    assert np.all(solve_prefactorized(F, np.zeros(4)) == 0.0)


def test_prefactorized_scalar_diag():
    F = factorize_spd(np.array([[4.0]]))
    assert np.allclose(solve_prefactorized(F, np.array([8.0])), [2.0])


def test_many_rhs_against_dense_oracle():
    rng = np.random.default_rng(2)
    A = random_spd(30, rng)
    F = factorize_spd(A)
    for _ in range(100):
        b = rng.standard_normal(30)
        assert np.max(np.abs(F.solve(b) - np.linalg.solve(A, b))) <= 1e-9


def test_factorize_once_solve_many_bitwise():
    rng = np.random.default_rng(3)
    A = random_spd(20, rng)
    bs = rng.standard_normal((50, 20))
    F = factorize_spd(A)
    once = [F.solve(b) for b in bs]
    fresh = [factorize_spd(A).solve(b) for b in bs]
    for a, b in zip(once, fresh):
        assert np.max(np.abs(a - b)) <= 1e-12


def test_not_positive_definite_raises():
    with pytest.raises(NotPositiveDefinite):
        factorize_spd(np.diag([1.0, -2.0, 3.0]))
    indef = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
    with pytest.raises(NotPositiveDefinite):
        factorize_spd(indef)


def test_dimension_mismatch():
    F = factorize_spd(np.eye(3))
    with pytest.raises(DimensionMismatch):
        F.solve(np.zeros(4))


def test_solve_general_identity():
    b = np.array([3.0, 1.0, -7.0])
    assert np.allclose(solve_general(np.eye(3), b), b)


def test_solve_general_permutation_pivoting():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    x = solve_general(A, np.array([3.0, 5.0]))
    assert np.allclose(x, [5.0, 3.0])


def test_solve_general_nonsymmetric_oracle():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((50, 50)) + 5.0 * np.eye(50)
    b = rng.standard_normal(50)
    x = solve_general(sp.csr_matrix(A), b)
    assert np.max(np.abs(x - np.linalg.solve(A, b))) <= 1e-8
    assert np.max(np.abs(A @ x - b)) <= 1e-8 * (1 + np.max(np.abs(b)))


def test_solve_general_singular_raises():
    A = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrix):
        solve_general(A, np.array([1.0, 1.0]))


def test_prefactorized_agrees_with_general():
    rng = np.random.default_rng(5)
    A = random_spd(25, rng)
    b = rng.standard_normal(25)
    x1 = solve_prefactorized(factorize_spd(A), b)
    x2 = solve_general(A, b)
    assert np.max(np.abs(x1 - x2)) <= 1e-8
