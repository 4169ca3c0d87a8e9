"""Matérn-type Gaussian fields on a structured 2D grid.

The precision root is ``A = delta I + gamma L_h`` with ``L_h`` the 5-point
Neumann Laplacian, and the covariance is ``C = s^2 A^{-2}`` for an amplitude
``s`` (default 1), so every covariance action reduces to sparse solves or
products with ``A``.  Nodes are ordered
row-major: node ``(i, j)`` (x-index i, y-index j) has index ``j (nx+1) + i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DimensionError, FactorizationError, NonFiniteError
from .randlinalg import SymmetricOperator, randomized_eigh

__all__ = [
    "FieldConfig", "PrecisionRoot", "build", "sample", "kle", "neumann_laplacian", "grid_coordinates",
    "apply_C", "apply_Cinv", "apply_Csqrt", "apply_Cinvsqrt",
]


@dataclass(frozen=True)
class FieldConfig:
    nx: int = 32
    ny: int = 32
    gamma: float = 0.1
    delta: float = 1.0
    alpha: int = 2
    boundary: str = "neumann"
    anisotropy: tuple[float, float] = (1.0, 1.0)
    amplitude: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"grid needs nx, ny >= 2, got {self.nx}x{self.ny}")
        if self.delta <= 0 or self.gamma < 0:
            raise ConfigError(f"need delta > 0 and gamma >= 0, got delta={self.delta}, gamma={self.gamma}")
        if self.alpha != 2:
            raise ConfigError("only alpha = 2 is supported")
        if self.boundary != "neumann":
            raise ConfigError(f"unsupported boundary {self.boundary!r}")
        if len(self.anisotropy) != 2 or min(self.anisotropy) <= 0:
            raise ConfigError("anisotropy must be two positive diagonal entries")
        if self.amplitude <= 0:
            raise ConfigError(f"amplitude must be positive, got {self.amplitude}")

    @classmethod
    def mass_consistent(cls, nx=32, ny=32, gamma=0.1, delta=1.0, **kw):
        """Amplitude 1/sqrt(hx hy): nodal white noise scaled like its continuum limit.

        With this choice pointwise variances stay O(1) under refinement
        instead of shrinking like the cell area.
        """
        return cls(nx, ny, gamma, delta, amplitude=float(np.sqrt(nx * ny)), **kw)

    @property
    def dim(self):
        return (self.nx + 1) * (self.ny + 1)


def grid_coordinates(nx, ny):
    """Node coordinates (x, y) of the unit-square grid, row-major order."""
    x = np.linspace(0.0, 1.0, nx + 1)
    y = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(x, y)
    return X.ravel(), Y.ravel()


def _path_laplacian(n, h):
    """Symmetric 1D Neumann Laplacian on n+1 nodes with half-weight end nodes.

    Row i of the mirror-ghost stencil scaled by the nodal control length
    (1/2 at the ends) gives this symmetric matrix.
    """
    main = np.full(n + 1, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def _half_weights(n):
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return sp.diags(w)


def neumann_laplacian(nx, ny, anisotropy=(1.0, 1.0)):
    """Symmetric 5-point Neumann Laplacian on the (nx+1)(ny+1) node grid.

    Equals the mirror-ghost stencil premultiplied by the nodal control-volume
    weights (1 interior, 1/2 edge, 1/4 corner), which makes it symmetric.
    Constants are in its null space.
    """
    hx, hy = 1.0 / nx, 1.0 / ny
    tx, ty = anisotropy
    Lx = _path_laplacian(nx, hx)
    Ly = _path_laplacian(ny, hy)
    Wx, Wy = _half_weights(nx), _half_weights(ny)
    # row-major: x index varies fastest, so x operators sit on the right of kron
    L = tx * sp.kron(Wy, Lx) + ty * sp.kron(Ly, Wx)
    return sp.csc_matrix(L)


@dataclass(frozen=True, eq=False)
class PrecisionRoot:
    """``A = delta I + gamma L_h`` with a factorization for solves.

    Immutable after :func:`build`.  ``C = s^2 A^{-2}`` with ``s = config.amplitude``,
    so ``C^{1/2} = s A^{-1}`` and ``C^{-1/2} = A / s``.
    """

    config: FieldConfig
    A: sp.csc_matrix
    _lu: object = field(repr=False)

    @property
    def dim(self):
        return self.A.shape[0]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.dim:
            raise DimensionError(f"expected leading dimension {self.dim}, got {x.shape}")
        return x

    def solve(self, b):
        b = self._check(b)
        x = self._lu.solve(b)
        # one step of iterative refinement keeps the relative residual near 1e-15
        x = x + self._lu.solve(b - self.A @ x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite value in precision-root solve")
        return x

    def apply_A(self, x):
        return self.A @ self._check(x)

    @property
    def amplitude(self):
        return self.config.amplitude

    def apply_C(self, x):
        return self.amplitude**2 * self.solve(self.solve(x))

    def apply_Cinv(self, x):
        return self.A @ (self.A @ self._check(x)) / self.amplitude**2

    def apply_Csqrt(self, x):
        return self.amplitude * self.solve(x)

    def apply_Cinvsqrt(self, x):
        return self.apply_A(x) / self.amplitude

    def operator(self, which):
        """Wrap one of ``C``, ``Cinv``, ``Csqrt``, ``Cinvsqrt`` as a SymmetricOperator."""
        fn = getattr(self, f"apply_{which}")
        return SymmetricOperator(self.dim, fn, fn)

    def sample(self, n, rng=None):
        """``n`` draws from N(0, C) as columns of a (dim, n) matrix."""
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        rng = np.random.default_rng(rng)
        xi = rng.standard_normal((n, self.dim)).T
        return self.apply_Csqrt(xi)

    def kle(self, r, rng=None, p=10, tol=1e-12):
        """Top-``r`` Karhunen-Loeve eigenpairs of C (identity-orthonormal).

        The randomized range of width r+p is polished by subspace iteration
        until each eigen-residual is below ``tol`` times the top eigenvalue.
        """
        from .subspaces import ReducedBasis

        if r > self.dim:
            raise DimensionError(f"rank {r} exceeds field dimension {self.dim}")
        p = min(p, self.dim - r)
        if p >= 2:
            res = randomized_eigh(self.operator("C"), r, p, passes=2, rng=rng, tol=tol)
            vals, vecs = res.eigenvalues, res.vectors
        else:
            # rank too close to the dimension for oversampling: dense fallback
            C = self.apply_C(np.eye(self.dim))
            vals, vecs = jacobi_eigh(C)
            vals, vecs = vals[:r], vecs[:, :r]
        return ReducedBasis(vecs, np.clip(vals, 0.0, None), kind="KLE", orthogonality="identity",
                            provenance={"p": p})


def build(config: FieldConfig) -> PrecisionRoot:
    """Assemble and factorize the precision root for ``config``."""
    L = neumann_laplacian(config.nx, config.ny, config.anisotropy)
    A = sp.csc_matrix(config.delta * sp.identity(config.dim) + config.gamma * L)
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise FactorizationError(f"factorization of precision root failed: {exc}") from exc
    # symmetric pivoting: A is SPD iff every pivot is positive
    if not np.all(lu.U.diagonal() > 0):
        raise FactorizationError("precision root is not positive definite")
    return PrecisionRoot(config, A, lu)


def sample(root, n, rng=None):
    return root.sample(n, rng)


def apply_C(root, x):
    return root.apply_C(x)


def apply_Cinv(root, x):
    return root.apply_Cinv(x)


def apply_Csqrt(root, x):
    return root.apply_Csqrt(x)


def apply_Cinvsqrt(root, x):
    return root.apply_Cinvsqrt(x)


def kle(root, r, rng=None):
    return root.kle(r, rng)
