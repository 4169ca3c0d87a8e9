"""Matrix-free randomized eigensolvers for symmetric operators.

All routines see an operator only through its action on blocks of vectors,
so the same code serves explicit matrices, covariance solves and Monte Carlo
Gauss-Newton Hessians assembled from adjoint Jacobian actions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConvergenceError, DimensionError, NonFiniteError, OrthogonalityError

__all__ = [
    "SymmetricOperator",
    "EigResult",
    "jacobi_eigh",
    "randomized_eigh",
    "generalized_eigh_via_transform",
    "refine_eigh",
    "adaptive_rank",
    "AdaptiveRank",
    "bound_factor",
]


@dataclass(frozen=True)
class SymmetricOperator:
    """A symmetric linear operator on R^dim given by its action.

    ``apply`` maps a length-``dim`` vector to a length-``dim`` vector.  When
    ``apply_block`` is provided it is used for (dim, k) blocks; otherwise
    blocks are applied column by column in order.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_block: Callable[[np.ndarray], np.ndarray] | None = None

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionError(f"expected vector of length {self.dim}, got shape {x.shape}")
        return np.asarray(self.apply(x), dtype=float)

    def matmat(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != self.dim:
            raise DimensionError(f"expected block with {self.dim} rows, got shape {X.shape}")
        if self.apply_block is not None:
            out = np.asarray(self.apply_block(X), dtype=float)
        else:
            out = np.empty_like(X)
            for j in range(X.shape[1]):
                out[:, j] = self.apply(X[:, j])
        if out.shape != X.shape:
            raise DimensionError(f"operator returned shape {out.shape} for input {X.shape}")
        return out

    @classmethod
    def from_matrix(cls, A):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"matrix must be square, got {A.shape}")
        return cls(A.shape[0], lambda x: A @ x, lambda X: A @ X)


@dataclass(frozen=True)
class EigResult:
    """Truncated eigendecomposition.

    ``orthogonality`` is ``"identity"`` or ``"weighted"``; in the weighted case
    ``weight`` is the operator W with V^T W V = I.
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray
    orthogonality: str = "identity"
    weight: SymmetricOperator | None = None

    @property
    def rank(self):
        return self.eigenvalues.shape[0]

    def orthogonality_error(self):
        k = self.rank
        if self.orthogonality == "identity":
            G = self.vectors.T @ self.vectors
        else:
            G = self.vectors.T @ self.weight.matmat(self.vectors)
        return float(np.max(np.abs(G - np.eye(k)))) if k else 0.0


def _round_robin(n):
    """Pairings for one parallel Jacobi sweep (circle method); -1 marks a bye."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        rounds.append([(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0])
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """Eigendecomposition of a small dense symmetric matrix by cyclic Jacobi.

    Rotations are applied in parallel (round-robin) order: each round rotates
    n/2 disjoint index pairs at once.  Iterates until the off-diagonal
    Frobenius norm is below ``tol * ||A||_F``.  Returns eigenvalues in
    descending order and the matching orthonormal eigenvectors.
    """
    A = np.array(A, dtype=float, copy=True)
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"matrix must be square, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteError("non-finite entry in matrix passed to jacobi_eigh")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n <= 1:
        return np.diag(A).copy(), V
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V
    rounds = [(np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in _round_robin(n)]

    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for P, Q in rounds:
            apq = A[P, Q]
            app = A[P, P]
            aqq = A[Q, Q]
            active = np.abs(apq) > 1e-300
            theta = np.where(active, (aqq - app) / np.where(active, 2.0 * apq, 1.0), 0.0)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp, rq = A[P, :].copy(), A[Q, :].copy()
            A[P, :] = c[:, None] * rp - s[:, None] * rq
            A[Q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = A[:, P].copy(), A[:, Q].copy()
            A[:, P] = cp * c - cq * s
            A[:, Q] = cp * s + cq * c
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            vp, vq = V[:, P].copy(), V[:, Q].copy()
            V[:, P] = vp * c - vq * s
            V[:, Q] = vp * s + vq * c

    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def _orth(Y):
    Q, _ = np.linalg.qr(Y)
    return Q


def _checked(op, X, what):
    Y = op.matmat(X)
    bad = ~np.all(np.isfinite(Y), axis=0)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite operator output for {what} probe {j}", index=j)
    return Y


def _fix_signs(V):
    # make the largest-magnitude entry of every column positive
    if V.shape[1]:
        idx = np.argmax(np.abs(V), axis=0)
        signs = np.sign(V[idx, np.arange(V.shape[1])])
        signs[signs == 0] = 1.0
        V = V * signs
    return V


def randomized_eigh(op, k, p=5, passes=2, rng=None, tol=None, max_iter=100):
    """Top-``k`` eigenpairs of a symmetric operator from k+p random probes.

    ``passes=1`` is the single-pass algorithm: the projected matrix is
    recovered from the one sketch ``Y = A Omega`` by solving
    ``B (Q^T Omega) = Q^T Y``.  ``passes=2`` runs one power iteration on the
    sketch and finishes with a Rayleigh-Ritz projection ``Q^T A Q``.
    With ``tol`` set, the k+p range is further polished by
    :func:`refine_eigh` until the eigen-residuals are below ``tol``.
    """
    if not isinstance(op, SymmetricOperator):
        op = SymmetricOperator.from_matrix(op)
    n = op.dim
    if k < 0 or p < 2:
        raise DimensionError(f"need k >= 0 and p >= 2, got k={k}, p={p}")
    if k + p > n:
        raise DimensionError(f"k + p = {k + p} exceeds operator dimension {n}")
    if passes not in (1, 2):
        raise ValueError(f"passes must be 1 or 2, got {passes}")
    rng = np.random.default_rng(rng)
    ell = k + p
    # column-major draw: column j is the j-th consecutive block of n normals
    omega = rng.standard_normal((ell, n)).T

    Y = _checked(op, omega, "sketch")
    if tol is not None:
        Q = _orth(Y) if passes == 1 else _orth(_checked(op, _orth(Y), "power-iteration"))
        return refine_eigh(op, Q, k, tol, max_iter)
    if passes == 1:
        Q = _orth(Y)
        lhs = (Q.T @ omega).T
        rhs = (Q.T @ Y).T
        B = np.linalg.lstsq(lhs, rhs, rcond=None)[0].T
    else:
        Q = _orth(Y)
        Q = _orth(_checked(op, Q, "power-iteration"))
        B = Q.T @ _checked(op, Q, "projection")
    B = 0.5 * (B + B.T)
    w, U = jacobi_eigh(B)
    return EigResult(w[:k].copy(), _fix_signs(Q @ U[:, :k]), "identity")


def refine_eigh(op, Q, k, tol=1e-12, max_iter=100):
    """Top-``k`` eigenpairs by block subspace iteration from the columns of ``Q``.

    Iterates ``Q <- orth(A Q)`` with a Rayleigh-Ritz step until every kept
    pair has residual ``||A v - lambda v|| <= tol |lambda_1|``.  ``Q`` should
    be wider than ``k`` (e.g. a k+p randomized range) so the kept pairs
    converge at rate lambda_{ell+1} / lambda_k.  Raises ConvergenceError after
    ``max_iter`` iterations.
    """
    if not isinstance(op, SymmetricOperator):
        op = SymmetricOperator.from_matrix(op)
    Q = _orth(np.asarray(Q, dtype=float))
    if not 0 <= k <= Q.shape[1]:
        raise DimensionError(f"k = {k} exceeds the {Q.shape[1]} starting columns")
    hist = []
    for _ in range(max_iter + 1):
        AQ = _checked(op, Q, "refinement")
        w, U = jacobi_eigh(0.5 * (Q.T @ AQ + AQ.T @ Q))
        V = Q @ U[:, :k]
        R = AQ @ U[:, :k] - V * w[:k]
        scale = abs(w[0]) if w.size and w[0] != 0 else 1.0
        err = float(np.max(np.linalg.norm(R, axis=0))) / scale if k else 0.0
        hist.append(err)
        if err <= tol:
            return EigResult(w[:k].copy(), _fix_signs(V), "identity")
        Q = _orth(AQ)
    raise ConvergenceError(f"subspace iteration stalled at residual {hist[-1]:.2e}", hist[-1], hist)


def generalized_eigh_via_transform(h, c_sqrt, c_inv, k, p=5, rng=None, passes=2, tol=1e-6, refine_tol=None):
    """Solve ``H v = lambda C^{-1} v`` through ``S = C^{1/2} H C^{1/2}``.

    Eigenvectors u of S map back to v = C^{1/2} u, which are
    C^{-1}-orthonormal.  Raises :class:`OrthogonalityError` when the
    back-transformed basis departs from C^{-1}-orthonormality by more than
    ``tol``.  ``refine_tol`` is passed to :func:`randomized_eigh` as its
    eigen-residual tolerance.
    """
    ops = [op if isinstance(op, SymmetricOperator) else SymmetricOperator.from_matrix(op)
           for op in (h, c_sqrt, c_inv)]
    h, c_sqrt, c_inv = ops
    if not (h.dim == c_sqrt.dim == c_inv.dim):
        raise DimensionError(f"operator dims differ: {h.dim}, {c_sqrt.dim}, {c_inv.dim}")

    def s_block(X):
        return c_sqrt.matmat(h.matmat(c_sqrt.matmat(X)))

    S = SymmetricOperator(h.dim, lambda x: s_block(x[:, None])[:, 0], s_block)
    res = randomized_eigh(S, k, p, passes=passes, rng=rng, tol=refine_tol)
    V = c_sqrt.matmat(res.vectors) if res.rank else res.vectors
    out = EigResult(res.eigenvalues, V, "weighted", c_inv)
    dev = out.orthogonality_error()
    if dev > tol:
        raise OrthogonalityError(
            f"C^-1 orthonormality lost after back-transform (max deviation {dev:.2e})", dev
        )
    return out


def bound_factor(n, k, p):
    """Expected-error multiplier 1 + 4 sqrt(n (k+p)) / (p-1)."""
    return 1.0 + 4.0 * np.sqrt(n * (k + p)) / (p - 1)


class AdaptiveRank(NamedTuple):
    rank: int
    satisfied: bool


def adaptive_rank(eig_estimates, n, p, tol):
    """Smallest k whose randomized error bound at d_{k+1} is below ``tol``.

    ``d_{k+1}`` is the (k+1)-th estimate (1-based).  If no k < len(d)
    qualifies the full length is returned with ``satisfied=False``.
    """
    d = np.abs(np.asarray(eig_estimates, dtype=float))
    if d.size == 0:
        raise DimensionError("empty eigenvalue estimate vector")
    if p < 2 or tol <= 0:
        raise ValueError(f"need p >= 2 and tol > 0, got p={p}, tol={tol}")
    for k in range(d.size):
        if bound_factor(n, k, p) * d[k] <= tol:
            return AdaptiveRank(k, True)
    return AdaptiveRank(int(d.size), False)
