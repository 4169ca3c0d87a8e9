"""Parametric maps m -> q with exact Jacobian and Jacobian-transpose actions.

Every map exposes ``evaluate``, ``jacobian_action`` and
``jacobian_transpose_action``.  Jacobian actions accept a single direction
(shape ``(d,)``) or a block of directions (shape ``(d, k)``).
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, DimensionError, FactorizationError, NonFiniteError

__all__ = [
    "ParametricMap",
    "Linearization",
    "LinearMap",
    "OscillatoryMap",
    "ConstantMap",
    "CrdConfig",
    "CrdMap",
    "CrdState",
    "bump_forcing",
    "velocity_field",
]


class Linearization:
    """Pair of block actions ``jvp(X) = J X`` and ``vjp(W) = J^T W`` at a fixed point."""

    def __init__(self, jvp, vjp):
        self.jvp = jvp
        self.vjp = vjp


class ParametricMap:
    """Base class.  Subclasses set ``d_M``, ``d_Q`` and implement the three actions."""

    d_M: int
    d_Q: int

    def evaluate(self, m):
        raise NotImplementedError

    def jacobian_action(self, m, dm):
        raise NotImplementedError

    def jacobian_transpose_action(self, m, w):
        raise NotImplementedError

    def linearize(self, m):
        """Jacobian actions frozen at ``m``; see :class:`Linearization`."""
        m = self._check_m(m)
        return Linearization(lambda X: self.jacobian_action(m, X),
                             lambda W: self.jacobian_transpose_action(m, W))

    def evaluate_many(self, M):
        """Evaluate at the columns of a (d_M, n) matrix."""
        M = np.asarray(M, dtype=float)
        return np.column_stack([self.evaluate(M[:, i]) for i in range(M.shape[1])]) if M.shape[1] \
            else np.zeros((self.d_Q, 0))

    def _check_m(self, m):
        m = np.asarray(m, dtype=float)
        if m.shape != (self.d_M,):
            raise DimensionError(f"parameter must have shape ({self.d_M},), got {m.shape}")
        return m

    def _check_dir(self, x, n, what):
        x = np.asarray(x, dtype=float)
        if x.ndim not in (1, 2) or x.shape[0] != n:
            raise DimensionError(f"{what} must have leading dimension {n}, got {x.shape}")
        return x


class LinearMap(ParametricMap):
    """q = G m."""

    def __init__(self, G):
        self.G = np.asarray(G, dtype=float)
        if self.G.ndim != 2:
            raise DimensionError("G must be a matrix")
        self.d_Q, self.d_M = self.G.shape

    def evaluate(self, m):
        return self.G @ self._check_m(m)

    def evaluate_many(self, M):
        return self.G @ np.asarray(M, dtype=float)

    def jacobian_action(self, m, dm):
        return self.G @ self._check_dir(dm, self.d_M, "dm")

    def jacobian_transpose_action(self, m, w):
        return self.G.T @ self._check_dir(w, self.d_Q, "w")


class ConstantMap(ParametricMap):
    """q = q0 for every m; zero Jacobian."""

    def __init__(self, q0, d_M):
        self.q0 = np.asarray(q0, dtype=float)
        self.d_Q = self.q0.shape[0]
        self.d_M = int(d_M)

    def evaluate(self, m):
        self._check_m(m)
        return self.q0.copy()

    def jacobian_action(self, m, dm):
        dm = self._check_dir(dm, self.d_M, "dm")
        return np.zeros((self.d_Q,) + dm.shape[1:])

    def jacobian_transpose_action(self, m, w):
        w = self._check_dir(w, self.d_Q, "w")
        return np.zeros((self.d_M,) + w.shape[1:])


class OscillatoryMap(ParametricMap):
    """q = B_out sin(omega W m), an oscillatory stand-in for wave-type maps."""

    def __init__(self, B_out, W, omega):
        self.B_out = np.asarray(B_out, dtype=float)
        self.W = np.asarray(W, dtype=float)
        self.omega = float(omega)
        if self.B_out.shape[1] != self.W.shape[0]:
            raise DimensionError(f"B_out {self.B_out.shape} and W {self.W.shape} do not compose")
        self.d_Q = self.B_out.shape[0]
        self.d_M = self.W.shape[1]

    @classmethod
    def random(cls, d_M, d_Q, width, omega, rng=None):
        rng = np.random.default_rng(rng)
        B_out = rng.standard_normal((d_Q, width)) / np.sqrt(width)
        W = rng.standard_normal((width, d_M)) / np.sqrt(d_M)
        return cls(B_out, W, omega)

    def evaluate(self, m):
        return self.B_out @ np.sin(self.omega * (self.W @ self._check_m(m)))

    def evaluate_many(self, M):
        return self.B_out @ np.sin(self.omega * (self.W @ np.asarray(M, dtype=float)))

    def _scale(self, m):
        return self.omega * np.cos(self.omega * (self.W @ self._check_m(m)))

    def jacobian_action(self, m, dm):
        dm = self._check_dir(dm, self.d_M, "dm")
        s = self._scale(m)
        z = self.W @ dm
        return self.B_out @ (s[:, None] * z if z.ndim == 2 else s * z)

    def jacobian_transpose_action(self, m, w):
        w = self._check_dir(w, self.d_Q, "w")
        s = self._scale(m)
        z = self.B_out.T @ w
        return self.W.T @ (s[:, None] * z if z.ndim == 2 else s * z)


def bump_forcing(x, y):
    return np.maximum(0.5, np.exp(-25.0 * (x - 0.7) ** 2 - 25.0 * (y - 0.7) ** 2))


def velocity_field(x, y, v0=1.0):
    """Analytic divergence-free cellular flow."""
    return (v0 * np.sin(np.pi * x) * np.cos(np.pi * y),
            -v0 * np.cos(np.pi * x) * np.sin(np.pi * y))


@dataclass(frozen=True)
class CrdConfig:
    nx: int = 32
    ny: int = 32
    k_diff: float = 0.1
    velocity_scale: float = 1.0
    obs_box: tuple[float, float, float, float] = (0.6, 0.8, 0.6, 0.8)
    obs_grid: tuple[int, int] = (7, 7)
    forcing: str = "bump"
    newton_tol: float = 1e-10
    newton_max_iters: int = 50
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    cache_size: int = 8

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise DimensionError("CRD grid needs nx, ny >= 2")
        x0, x1, y0, y1 = self.obs_box
        if not (0 < x0 <= x1 < 1 and 0 < y0 <= y1 < 1):
            raise DimensionError(f"observation box {self.obs_box} must lie strictly inside (0,1)^2")
        if self.forcing not in ("bump", "zero"):
            raise DimensionError(f"unknown forcing {self.forcing!r}")


@dataclass
class CrdState:
    """Converged state at one parameter, with the factorized linearization."""

    u: np.ndarray               # interior unknowns
    coeff: np.ndarray           # exp(m) on interior nodes
    lu: object
    residual_history: list = field(default_factory=list)


class CrdMap(ParametricMap):
    """Nonlinear convection-reaction-diffusion map.

    Solves ``-div(k grad u) + v . grad u + exp(m) u^3 = f`` on the unit square
    with ``u = 0`` on the boundary (5-point diffusion, first-order upwind
    convection, nodal reaction) and observes ``u`` by bilinear interpolation
    on a tensor grid of points.  ``m`` lives on all (nx+1)(ny+1) grid nodes;
    only interior values enter the residual.
    """

    def __init__(self, config: CrdConfig | None = None):
        self.config = cfg = config or CrdConfig()
        nx, ny = cfg.nx, cfg.ny
        hx, hy = 1.0 / nx, 1.0 / ny
        self.d_M = (nx + 1) * (ny + 1)
        ix, iy = np.meshgrid(np.arange(1, nx), np.arange(1, ny))
        ix, iy = ix.ravel(), iy.ravel()
        self.interior = iy * (nx + 1) + ix
        n_int = self.interior.size
        x, y = ix * hx, iy * hy

        # interior index of node (i, j), -1 on the boundary
        lookup = -np.ones((ny + 1, nx + 1), dtype=int)
        lookup[iy, ix] = np.arange(n_int)

        vx, vy = velocity_field(x, y, cfg.velocity_scale)
        rows, cols, vals = [], [], []

        def add(r, c, v):
            keep = c >= 0
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(np.broadcast_to(v, r.shape)[keep])

        me = np.arange(n_int)
        west, east = lookup[iy, ix - 1], lookup[iy, ix + 1]
        south, north = lookup[iy - 1, ix], lookup[iy + 1, ix]
        kx, ky = cfg.k_diff / hx**2, cfg.k_diff / hy**2
        add(me, me, 2 * kx + 2 * ky)
        for nb, kk in ((west, kx), (east, kx), (south, ky), (north, ky)):
            add(me, nb, -kk)
        # upwind convection
        px, nxv = np.maximum(vx, 0.0) / hx, np.minimum(vx, 0.0) / hx
        py, nyv = np.maximum(vy, 0.0) / hy, np.minimum(vy, 0.0) / hy
        add(me, me, px - nxv + py - nyv)
        add(me, west, -px)
        add(me, east, nxv)
        add(me, south, -py)
        add(me, north, nyv)
        self.K = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_int, n_int)
        )
        self.f = bump_forcing(x, y) if cfg.forcing == "bump" else np.zeros(n_int)
        self.B = self._observation_matrix(lookup)
        self.d_Q = self.B.shape[0]
        self._cache: OrderedDict[bytes, CrdState] = OrderedDict()
        self._lock = threading.Lock()

    def _observation_matrix(self, lookup):
        cfg = self.config
        x0, x1, y0, y1 = cfg.obs_box
        px, py = np.meshgrid(np.linspace(x0, x1, cfg.obs_grid[0]), np.linspace(y0, y1, cfg.obs_grid[1]))
        px, py = px.ravel(), py.ravel()
        self.obs_points = np.column_stack([px, py])
        sx, sy = px * cfg.nx, py * cfg.ny
        i = np.minimum(np.floor(sx).astype(int), cfg.nx - 1)
        j = np.minimum(np.floor(sy).astype(int), cfg.ny - 1)
        tx, ty = sx - i, sy - j
        rows, cols, vals = [], [], []
        for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                          (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
            c = lookup[j + dj, i + di]
            keep = c >= 0
            rows.append(np.flatnonzero(keep))
            cols.append(c[keep])
            vals.append(w[keep])
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(px.size, self.interior.size),
        )

    # state solve ---------------------------------------------------------

    def residual(self, u, coeff):
        return self.K @ u + coeff * u**3 - self.f

    def linearization(self, u, coeff):
        return sp.csc_matrix(self.K + sp.diags(3.0 * coeff * u**2))

    def _factorize(self, u, coeff):
        try:
            return spla.splu(self.linearization(u, coeff))
        except RuntimeError as exc:
            raise FactorizationError(f"singular linearization: {exc}") from exc

    def solve_state(self, m, u0=None):
        """Newton with Armijo backtracking on 0.5 ||R||^2.

        Returns a :class:`CrdState`; ``residual_history`` holds the residual
        2-norm at the initial guess and after every accepted step.
        """
        cfg = self.config
        m = self._check_m(m)
        coeff = np.exp(m[self.interior])
        u = np.zeros(self.interior.size) if u0 is None else np.array(u0, dtype=float)
        R = self.residual(u, coeff)
        rnorm = np.linalg.norm(R)
        history = [rnorm]
        for _ in range(cfg.newton_max_iters):
            if np.max(np.abs(R)) <= cfg.newton_tol:
                break
            du = -self._factorize(u, coeff).solve(R)
            if not np.all(np.isfinite(du)):
                raise NonFiniteError("NaN in Newton update")
            step = 1.0
            while True:
                u_new = u + step * du
                R_new = self.residual(u_new, coeff)
                r_new = np.linalg.norm(R_new)
                if r_new**2 <= (1.0 - 2.0 * cfg.armijo_c1 * step) * rnorm**2:
                    break
                step *= cfg.backtrack
                if step < 1e-10:
                    raise ConvergenceError("Newton line search stalled",
                                           residual_norm=float(np.max(np.abs(R))), history=history)
            u, R, rnorm = u_new, R_new, r_new
            history.append(rnorm)
        res_inf = float(np.max(np.abs(R)))
        if not np.all(np.isfinite(u)):
            raise NonFiniteError("NaN in CRD state")
        if res_inf > cfg.newton_tol:
            raise ConvergenceError(
                f"Newton did not converge in {cfg.newton_max_iters} iterations (residual {res_inf:.3e})",
                residual_norm=res_inf, history=history,
            )
        return CrdState(u, coeff, self._factorize(u, coeff), history)

    def state(self, m, use_cache=True):
        m = self._check_m(m)
        if not use_cache:
            return self.solve_state(m)
        key = m.tobytes()
        with self._lock:
            st = self._cache.get(key)
            if st is not None:
                self._cache.move_to_end(key)
                return st
        st = self.solve_state(m)
        with self._lock:
            self._cache[key] = st
            while len(self._cache) > self.config.cache_size:
                self._cache.popitem(last=False)
        return st

    def clear_cache(self):
        with self._lock:
            self._cache.clear()

    def full_state(self, m, use_cache=True):
        """State on all grid nodes (boundary zeros included)."""
        u = np.zeros(self.d_M)
        u[self.interior] = self.state(m, use_cache).u
        return u

    # map interface -------------------------------------------------------

    def evaluate(self, m, use_cache=True):
        return self.B @ self.state(m, use_cache).u

    # J = -B A_u^{-1} dR/dm, with dR/dm = diag(exp(m) u^3) on interior nodes

    def _jvp(self, st, dm):
        dRdm = st.coeff * st.u**3
        rhs = dm[self.interior]
        rhs = dRdm[:, None] * rhs if rhs.ndim == 2 else dRdm * rhs
        return -(self.B @ st.lu.solve(rhs))

    def _vjp(self, st, w):
        dRdm = st.coeff * st.u**3
        lam = st.lu.solve(self.B.T @ w, trans="T")
        lam = dRdm[:, None] * lam if lam.ndim == 2 else dRdm * lam
        out = np.zeros((self.d_M,) + w.shape[1:])
        out[self.interior] = -lam
        return out

    def jacobian_action(self, m, dm, use_cache=True):
        dm = self._check_dir(dm, self.d_M, "dm")
        return self._jvp(self.state(m, use_cache), dm)

    def jacobian_transpose_action(self, m, w, use_cache=True):
        w = self._check_dir(w, self.d_Q, "w")
        return self._vjp(self.state(m, use_cache), w)

    def linearize(self, m):
        # holds its own state so long sweeps do not depend on the LRU cache
        st = self.solve_state(m)
        return Linearization(lambda X: self._jvp(st, X), lambda W: self._vjp(st, W))
