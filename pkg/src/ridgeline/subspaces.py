"""Input and output reduced bases and the diagnostics built on them.

Active subspace (AS) bases come from the covariance-preconditioned,
sample-averaged Gauss-Newton Hessian; POD bases from output snapshots;
KLE bases from the covariance alone (see :mod:`ridgeline.gaussianfield`).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, NonFiniteError, NumericalError, RidgelineError
from .randlinalg import SymmetricOperator, generalized_eigh_via_transform
from .parallel import ordered_map

log = logging.getLogger(__name__)

__all__ = [
    "ReducedBasis",
    "RidgeProjectors",
    "active_subspace",
    "pod",
    "random_basis",
    "orthogonalize_rescale",
    "projection_error",
    "input_projection",
    "ProjectionError",
    "conditional_expectation",
    "bound_check",
    "BoundReport",
    "principal_angles",
]

KINDS = ("AS", "KLE", "POD", "RandomInput", "RandomOutput")


@dataclass(frozen=True, eq=False)
class ReducedBasis:
    """A rank-r basis with its eigenvalues.

    ``orthogonality`` is ``"identity"`` (V^T V = I) or ``"weighted"``
    (V^T C^{-1} V = I, with ``weight`` the C^{-1} operator).  ``scale``, when
    set, holds per-column factors applied by :attr:`scaled_matrix`.
    ``total`` is the trace of the underlying operator when known, so trailing
    eigenvalue sums are available beyond the computed rank.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    kind: str
    orthogonality: str = "identity"
    weight: SymmetricOperator | None = None
    scale: np.ndarray | None = None
    center: np.ndarray | None = None
    spectrum: np.ndarray | None = None
    total: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.matrix.ndim != 2 or self.matrix.shape[1] != self.eigenvalues.shape[0]:
            raise DimensionError(
                f"basis matrix {self.matrix.shape} does not match {self.eigenvalues.shape[0]} eigenvalues"
            )

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def rank(self):
        return self.matrix.shape[1]

    @property
    def scaled_matrix(self):
        return self.matrix if self.scale is None else self.matrix * self.scale

    def truncate(self, r):
        if r > self.rank:
            raise DimensionError(f"cannot truncate rank-{self.rank} basis to {r}")
        return replace(self, matrix=self.matrix[:, :r], eigenvalues=self.eigenvalues[:r],
                       scale=None if self.scale is None else self.scale[:r])

    def orthogonality_error(self):
        V = self.matrix
        G = V.T @ (V if self.orthogonality == "identity" else self.weight.matmat(V))
        return float(np.max(np.abs(G - np.eye(self.rank)))) if self.rank else 0.0

    def trailing_sum(self, r):
        """Sum of eigenvalues past index r of the underlying operator."""
        if self.spectrum is not None:
            return float(np.sum(self.spectrum[r:]))
        if self.total is None:
            raise RidgelineError("trailing sum needs the full spectrum or the operator trace")
        return float(self.total - np.sum(self.eigenvalues[:r]))


@dataclass(frozen=True)
class RidgeProjectors:
    input_basis: ReducedBasis
    output_basis: ReducedBasis
    output_shift: np.ndarray | None = None

    def __post_init__(self):
        if self.input_basis.rank > self.input_basis.dim or self.output_basis.rank > self.output_basis.dim:
            raise DimensionError("basis rank exceeds its ambient dimension")

    @property
    def shift(self):
        if self.output_shift is not None:
            return self.output_shift
        if self.output_basis.center is not None:
            return self.output_basis.center
        return np.zeros(self.output_basis.dim)


def _linearize_all(fmap, M):
    """Linearize at each column of M; failed samples are skipped and counted."""
    def one(i):
        try:
            return fmap.linearize(M[:, i])
        except NumericalError as exc:
            log.warning("sample %d excluded from active subspace: %s", i, exc)
            return None

    lins = ordered_map(one, range(M.shape[1]))
    kept = [lin for lin in lins if lin is not None]
    return kept, len(lins) - len(kept)


def active_subspace(fmap, fieldroot, n_samples=256, r=8, p=10, rng=None, passes=2,
                    samples=None, with_trace=True, refine_tol=None):
    """Generalized eigenbasis of the averaged Gauss-Newton Hessian against C^{-1}.

    H X = (1/N) sum_i J_i^T (J_i X), applied with all probes of a block per
    sample before moving to the next sample.  With ``with_trace`` the exact
    trace of C^{1/2} H C^{1/2} and per-sample eigenvalue contributions are
    recorded so trailing sums and their Monte Carlo errors are available.
    ``refine_tol`` polishes the eigenpairs by subspace iteration.
    """
    rng = np.random.default_rng(rng)
    if samples is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        samples = fieldroot.sample(n_samples, rng)
    lins, n_failed = _linearize_all(fmap, samples)
    if n_failed:
        warnings.warn(f"{n_failed} of {samples.shape[1]} AS samples failed and were excluded")
    if not lins:
        raise NumericalError("every active-subspace sample failed")
    N = len(lins)
    d = fmap.d_M

    def h_block(X):
        out = np.zeros_like(X)
        for lin in lins:
            out += lin.vjp(lin.jvp(X))
        return out / N

    H = SymmetricOperator(d, lambda x: h_block(x[:, None])[:, 0], h_block)
    p = min(p, d - r)
    res = generalized_eigh_via_transform(
        H, fieldroot.operator("Csqrt"), fieldroot.operator("Cinv"), r, p, rng=rng, passes=passes,
        refine_tol=refine_tol,
    )
    vals = np.clip(res.eigenvalues, 0.0, None)
    prov = {"n_samples": int(samples.shape[1]), "n_failed": n_failed, "p": p, "passes": passes}
    total = None
    if with_trace:
        eye_q = np.eye(fmap.d_Q)
        per_trace = np.empty(N)
        per_energy = np.empty((N, r))
        for i, lin in enumerate(lins):
            # ||J_i C^{1/2}||_F^2 via d_Q adjoint actions
            per_trace[i] = np.sum(fieldroot.apply_Csqrt(lin.vjp(eye_q)) ** 2)
            per_energy[i] = np.sum(lin.jvp(res.vectors) ** 2, axis=0) if r else []
        total = float(per_trace.mean())
        prov["per_sample_trace"] = per_trace
        prov["per_sample_energy"] = per_energy
    return ReducedBasis(res.vectors, vals, "AS", "weighted", res.weight, total=total, provenance=prov)


def pod(snapshots, r, tol=1e-12):
    """POD basis of (1/N) sum q_i q_i^T from the snapshot matrix.

    The eigenpairs are read off a thin SVD of Q / sqrt(N), which is the
    method of snapshots without forming Q^T Q; small eigenvalues keep their
    relative accuracy.  The snapshot mean is attached as ``center``.  Ranks
    above the numerical rank of the snapshot set are truncated with a warning.
    """
    Q = np.asarray(snapshots, dtype=float)
    if Q.ndim != 2 or Q.shape[1] < 1:
        raise DimensionError(f"snapshots must be a (d_Q, N) matrix with N >= 1, got {Q.shape}")
    d, N = Q.shape
    if not np.all(np.isfinite(Q)):
        raise NonFiniteError("non-finite snapshot entry")
    U, s, _ = np.linalg.svd(Q / np.sqrt(N), full_matrices=False)
    w = s**2
    numrank = int(np.sum(s > tol * max(s[0], np.finfo(float).tiny)))
    if r > numrank:
        warnings.warn(f"requested POD rank {r} exceeds snapshot rank {numrank}; truncating")
        r = numrank
    Phi = U[:, :r]
    idx = np.argmax(np.abs(Phi), axis=0)
    Phi = Phi * np.where(Phi[idx, np.arange(r)] < 0, -1.0, 1.0)
    spectrum = np.zeros(d)
    spectrum[:w.size] = w
    # per-snapshot energies give Monte Carlo errors for trailing sums
    prov = {"n_samples": N, "numerical_rank": numrank,
            "per_sample_trace": np.sum(Q * Q, axis=0), "per_sample_energy": ((Phi.T @ Q) ** 2).T}
    return ReducedBasis(Phi, w[:r].copy(), "POD", "identity", center=Q.mean(axis=1), spectrum=spectrum,
                        total=float(np.sum(Q * Q) / N), provenance=prov)


def random_basis(d, r, rng=None, kind="RandomInput"):
    """Orthonormalized Gaussian basis with uninformative unit eigenvalues."""
    if r > d:
        raise DimensionError(f"rank {r} exceeds dimension {d}")
    rng = np.random.default_rng(rng)
    Q, R = np.linalg.qr(rng.standard_normal((r, d)).T)
    Q = Q * np.where(np.diag(R) < 0, -1.0, 1.0)
    return ReducedBasis(Q, np.ones(r), kind, "identity")


def orthogonalize_rescale(basis, rescale=True, floor=1e-3):
    """Re-orthonormalize in the identity inner product and attach column scales.

    Column i is scaled by max(sqrt(lambda_i / lambda_1), floor) when
    ``rescale`` is on; the scales live in ``basis.scale`` so the matrix itself
    stays orthonormal.
    """
    V = basis.matrix
    Q, R = np.linalg.qr(V)
    d = np.diag(R)
    if basis.rank and np.min(np.abs(d)) <= 1e-12 * np.max(np.abs(d)):
        raise NumericalError("basis is rank deficient; cannot re-orthogonalize")
    Q = Q * np.where(d < 0, -1.0, 1.0)
    scale = None
    if rescale and basis.rank:
        lam = np.clip(basis.eigenvalues, 0.0, None)
        if lam[0] > 0:
            scale = np.maximum(np.sqrt(lam / lam[0]), floor)
        else:
            scale = np.ones(basis.rank)
    return replace(basis, matrix=Q, orthogonality="identity", weight=None, scale=scale)


def principal_angles(A, B):
    """Principal angles (radians) between the column spaces of A and B."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))


@dataclass(frozen=True)
class ProjectionError:
    mean: float
    stderr: float
    n: int
    n_failed: int
    per_sample: np.ndarray


def input_projection(basis, M):
    """Apply the native projector of ``basis`` to the columns of ``M``.

    Weighted (C^{-1}-orthonormal) bases use the C-orthogonal projector
    V V^T C^{-1}; identity bases use V V^T.
    """
    V = basis.matrix
    if basis.orthogonality == "weighted":
        return V @ (V.T @ basis.weight.matmat(M))
    return V @ (V.T @ M)


def projection_error(m_test, q_test, projectors, fmap, input_projector="native"):
    """Monte Carlo mean of ||P_POD q(P_in m) - q(m)|| / ||q(m)|| on held-out samples.

    ``input_projector="native"`` uses the basis's own projector (C-orthogonal
    for AS, orthogonal for KLE and random bases); ``"orthogonal"`` forces the
    orthogonal projector onto the span, re-orthonormalizing weighted bases.
    """
    if input_projector not in ("native", "orthogonal"):
        raise ValueError(f"unknown input projector {input_projector!r}")
    V = projectors.input_basis
    if input_projector == "orthogonal" and V.orthogonality != "identity":
        V = orthogonalize_rescale(V, rescale=False)
    Phi = projectors.output_basis.matrix
    M = np.asarray(m_test, dtype=float)
    Qt = np.asarray(q_test, dtype=float)
    PM = input_projection(V, M)

    def one(i):
        try:
            return fmap.evaluate(PM[:, i])
        except NumericalError as exc:
            log.warning("projected test point %d failed: %s", i, exc)
            return None

    qs = ordered_map(one, range(M.shape[1]))
    errs = []
    for i, qp in enumerate(qs):
        if qp is None:
            continue
        errs.append(np.linalg.norm(Phi @ (Phi.T @ qp) - Qt[:, i]) / np.linalg.norm(Qt[:, i]))
    errs = np.asarray(errs)
    n = errs.size
    if n == 0:
        raise NumericalError("every projected test point failed")
    se = float(errs.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ProjectionError(float(errs.mean()), se, n, M.shape[1] - n, errs)


def conditional_expectation(fmap, fieldroot, basis, m, n_inner, rng=None, return_samples=False):
    """Estimate E_y[q(P m + (I - P) y)], y ~ N(0, C), for P = V V^T C^{-1}.

    ``basis`` must be C^{-1}-orthonormal.  Returns ``(mean, stderr)``; with
    ``return_samples`` the raw evaluations are returned as a third item.
    """
    if basis.orthogonality != "weighted":
        raise ValueError("conditional expectation needs a C^-1-orthonormal (weighted) basis")
    V = basis.matrix
    m = np.asarray(m, dtype=float)
    Y = fieldroot.sample(n_inner, rng)
    # P x = V V^T C^{-1} x; x = P m + (I - P) y = y + P (m - y)
    D = m[:, None] - Y
    X = Y + V @ (V.T @ fieldroot.apply_Cinv(D))
    Qs = np.column_stack(ordered_map(lambda i: fmap.evaluate(X[:, i]), range(n_inner)))
    mean = Qs.mean(axis=1)
    se = Qs.std(axis=1, ddof=1) / np.sqrt(n_inner) if n_inner > 1 else np.zeros_like(mean)
    return (mean, se, Qs) if return_samples else (mean, se)


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    lhs_raw: float
    rhs: float
    rhs_as: float
    rhs_pod: float
    se_lhs: float
    se_rhs: float
    r_M: int
    r_Q: int
    n_outer: int
    n_inner: int
    roundoff: float = 0.0
    rhs_kle_note: str = (
        "KLE-based bound needs a Lipschitz constant that is not estimated; not certified"
    )

    @property
    def combined_se(self):
        return float(np.hypot(self.se_lhs, self.se_rhs))

    @property
    def margin(self):
        return self.rhs + 3.0 * self.combined_se + self.roundoff - self.lhs

    @property
    def passed(self):
        return bool(self.margin >= 0)

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out.update(combined_se=self.combined_se, margin=self.margin, passed=self.passed)
        return out


def _trailing_se(basis, r):
    prov = basis.provenance
    if "per_sample_trace" not in prov:
        return 0.0
    t = prov["per_sample_trace"] - prov["per_sample_energy"][:, :r].sum(axis=1)
    return float(t.std(ddof=1) / np.sqrt(t.size)) if t.size > 1 else 0.0


def bound_check(fmap, fieldroot, as_basis, pod_basis, r_M, r_Q, n_outer=64, n_inner=256, rng=None):
    """Nested Monte Carlo check of the input-output ridge error bound.

    LHS = E ||q(m) - Phi Phi^T q_r(m)||^2 with q_r the conditional expectation
    under the AS projector; the inner Monte Carlo noise contribution
    ||Phi^T (q_r_hat - q_r)||^2 is estimated per outer sample and subtracted
    (``lhs_raw`` keeps the uncorrected value).  RHS is the sum of the AS and
    POD trailing eigenvalue sums.
    """
    rng = np.random.default_rng(rng)
    V = as_basis.truncate(r_M)
    Phi = pod_basis.matrix[:, :r_Q]
    outer = fieldroot.sample(n_outer, rng)
    raw = np.empty(n_outer)
    corrected = np.empty(n_outer)
    energy = 0.0
    for j in range(n_outer):
        m = outer[:, j]
        q = fmap.evaluate(m)
        energy += q @ q / n_outer
        qr, _, Qs = conditional_expectation(fmap, fieldroot, V, m, n_inner, rng, return_samples=True)
        raw[j] = np.sum((q - Phi @ (Phi.T @ qr)) ** 2)
        noise = np.sum(np.var(Phi.T @ Qs, axis=1, ddof=1)) / n_inner if n_inner > 1 else 0.0
        corrected[j] = raw[j] - noise
    rhs_as = as_basis.trailing_sum(r_M)
    rhs_pod = pod_basis.trailing_sum(r_Q)
    se_lhs = float(corrected.std(ddof=1) / np.sqrt(n_outer)) if n_outer > 1 else 0.0
    se_rhs = float(np.hypot(_trailing_se(as_basis, r_M), _trailing_se(pod_basis, r_Q)))
    return BoundReport(float(corrected.mean()), float(raw.mean()), rhs_as + rhs_pod, rhs_as, rhs_pod,
                       se_lhs, se_rhs, r_M, r_Q, n_outer, n_inner,
                       roundoff=float(64 * np.finfo(float).eps * energy))
