import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from ridgeline.errors import DimensionError, NonFiniteError, OrthogonalityError
from ridgeline.gaussianfield import FieldConfig, build
from ridgeline.randlinalg import (SymmetricOperator, adaptive_rank, bound_factor, generalized_eigh_via_transform,
                                  jacobi_eigh, randomized_eigh, refine_eigh)


def spd_with_spectrum(vals, rng):
    n = len(vals)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (U * vals) @ U.T


@given(n=st.integers(1, 30), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_jacobi_matches_dense(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A = A + A.T
    w, V = jacobi_eigh(A)
    ref = np.sort(np.linalg.eigvalsh(A))[::-1]
    assert np.allclose(w, ref, atol=1e-12 * max(1.0, np.abs(ref).max()))
    assert np.allclose(V.T @ V, np.eye(n), atol=1e-12)
    assert np.allclose(A @ V, V * w, atol=1e-11 * max(1.0, np.abs(ref).max()))


def test_jacobi_diagonal_and_zero():
    w, V = jacobi_eigh(np.diag([1.0, 3.0, 2.0]))
    assert np.array_equal(w, [3.0, 2.0, 1.0])
    w, _ = jacobi_eigh(np.zeros((4, 4)))
    assert np.array_equal(w, np.zeros(4))


def test_diag_example():
    A = np.diag([5.0, 4.0, 3.0, 2.0, 1.0])
    res = randomized_eigh(SymmetricOperator.from_matrix(A), 2, 3, passes=2, rng=0)
    assert np.allclose(res.eigenvalues, [5.0, 4.0], rtol=1e-12)
    assert np.allclose(np.abs(res.vectors), np.eye(5)[:, :2], atol=1e-10)


@pytest.mark.parametrize("k", [1, 3, 7])
def test_identity_operator(k):
    res = randomized_eigh(SymmetricOperator.from_matrix(np.eye(12)), k, 4, rng=1)
    assert np.allclose(res.eigenvalues, 1.0, atol=1e-12)


def test_geometric_spectrum_example():
    rng = np.random.default_rng(3)
    A = spd_with_spectrum(2.0 ** -np.arange(50), rng)
    ref = np.sort(np.linalg.eigvalsh(A))[::-1][:10]
    res = randomized_eigh(A, 10, 5, passes=2, rng=11)
    assert np.max(np.abs(res.eigenvalues - ref) / ref) <= 1e-6


def test_orthonormal_vectors_and_seed_determinism():
    rng = np.random.default_rng(0)
    A = spd_with_spectrum(0.7 ** np.arange(40), rng)
    a = randomized_eigh(A, 6, 5, rng=42)
    b = randomized_eigh(A, 6, 5, rng=42)
    assert a.orthogonality_error() <= 1e-10
    assert np.array_equal(a.eigenvalues, b.eigenvalues) and np.array_equal(a.vectors, b.vectors)
    assert np.all(np.diff(a.eigenvalues) <= 0)


def test_reconstruction_bound_statistical():
    n, k, p = 60, 5, 5
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        vals = np.concatenate([np.linspace(10, 5, k), 0.3 ** np.arange(1, n - k + 1)])
        A = spd_with_spectrum(vals, rng)
        res = randomized_eigh(A, k, p, rng=rng)
        err = np.linalg.norm(A - (res.vectors * res.eigenvalues) @ res.vectors.T, 2)
        hits += err <= bound_factor(n, k, p) * vals[k]
    assert hits >= 95


def test_two_pass_beats_single_pass():
    better = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        n = 60
        A = spd_with_spectrum(0.6 ** np.arange(n), rng)
        w, U = np.linalg.eigh(A)
        k = 8
        Ak = (U[:, -k:] * w[-k:]) @ U[:, -k:].T
        errs = []
        for passes in (1, 2):
            r = randomized_eigh(A, k, 5, passes=passes, rng=seed)
            errs.append(np.linalg.norm((r.vectors * r.eigenvalues) @ r.vectors.T - Ak))
        better += errs[1] <= errs[0]
    assert better >= 45


def test_errors():
    A = np.eye(6)
    with pytest.raises(DimensionError):
        randomized_eigh(A, 5, 2)
    with pytest.raises(DimensionError):
        randomized_eigh(A, 2, 1)
    op = SymmetricOperator(6, lambda x: x, lambda X: np.where(np.arange(X.shape[1]) == 2, np.nan, X))
    with pytest.raises(NonFiniteError) as info:
        randomized_eigh(op, 2, 2, rng=0)
    assert info.value.index == 2
    with pytest.raises(DimensionError):
        SymmetricOperator.from_matrix(np.eye(3)).matvec(np.ones(4))


def test_operator_symmetry_invariant():
    rng = np.random.default_rng(5)
    op = build(FieldConfig(8, 8, 0.1, 1.0)).operator("C")
    x, y = rng.standard_normal((2, op.dim))
    Ax, Ay = op.matvec(x), op.matvec(y)
    assert abs(Ax @ y - x @ Ay) <= 1e-10 * (np.linalg.norm(Ax) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(Ay))


class TestGeneralized:
    root = build(FieldConfig(8, 8, 0.1, 1.0))

    def ops(self):
        return self.root.operator("Csqrt"), self.root.operator("Cinv")

    @pytest.mark.parametrize("scale", [1.0, 3.0])
    def test_scaled_precision(self, scale):
        cs, ci = self.ops()
        h = SymmetricOperator(ci.dim, lambda x: scale * ci.matvec(x), lambda X: scale * ci.matmat(X))
        res = generalized_eigh_via_transform(h, cs, ci, 5, 5, rng=0)
        assert np.allclose(res.eigenvalues, scale, rtol=1e-10)

    def test_dense_generalized_oracle(self):
        rng = np.random.default_rng(7)
        d = self.root.dim
        G = rng.standard_normal((20, d))
        H = G.T @ G
        cs, ci = self.ops()
        res = generalized_eigh_via_transform(H, cs, ci, 10, 10, rng=1)
        Cinv = ci.matmat(np.eye(d))
        ref = sla.eigh(H, Cinv, eigvals_only=True)[::-1][:10]
        assert np.max(np.abs(res.eigenvalues - ref) / ref) <= 1e-6
        assert res.orthogonality == "weighted"
        assert res.orthogonality_error() <= 1e-8

    def test_lost_orthogonality_flagged(self):
        cs, ci = self.ops()
        # a wrong "square root" breaks C^-1 orthonormality after the back-transform
        bad = SymmetricOperator(cs.dim, lambda x: 2 * cs.matvec(x), lambda X: 2 * cs.matmat(X))
        with pytest.raises(OrthogonalityError):
            generalized_eigh_via_transform(ci, bad, ci, 3, 4, rng=0)


def test_adaptive_rank_examples():
    assert adaptive_rank([1.0, 0.1, 1e-12], 100, 5, 1e-6) == (2, True)
    assert adaptive_rank([0.0, 0.0, 0.0], 10, 3, 1e-9).rank == 0
    assert adaptive_rank([1.0, 0.5], 10, 3, 1e-9) == (2, False)
    with pytest.raises(DimensionError):
        adaptive_rank([], 10, 3, 1e-3)


@given(st.lists(st.floats(1e-14, 1.0), min_size=1, max_size=12), st.floats(1e-10, 1e-1), st.floats(0.01, 1.0))
def test_adaptive_rank_monotone_in_tol(d, tol, shrink):
    d = sorted(d, reverse=True)
    assert adaptive_rank(d, 100, 5, tol * shrink).rank >= adaptive_rank(d, 100, 5, tol).rank


@pytest.mark.parametrize("passes", [1, 2])
def test_refined_eigh_reaches_tolerance(passes):
    rng = np.random.default_rng(8)
    vals = 1.0 / (1.0 + np.arange(80)) ** 2  # slow algebraic decay
    A = spd_with_spectrum(vals, rng)
    res = randomized_eigh(A, 4, 10, passes=passes, rng=0, tol=1e-12)
    assert np.allclose(res.eigenvalues, vals[:4], rtol=1e-11)
    assert np.linalg.norm(A @ res.vectors - res.vectors * res.eigenvalues) <= 1e-11


def test_refine_requires_wide_start():
    with pytest.raises(DimensionError):
        refine_eigh(np.eye(5), np.eye(5)[:, :2], 3)
