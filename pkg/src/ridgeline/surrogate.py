"""Projected ridge networks ``f(m) = Phi f_r(V^T m) + b_Q`` and their training.

The inner map ``f_r`` has two softplus layers.  Weights travel as one flat
vector in the order ``[W0 (FS only), W1, b1, W2, b2, Phi, b_Q]`` with
matrices stored row-major.  Gradients and Gauss-Newton products are written
out by hand (reverse sweep, and forward tangent followed by a reverse sweep).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NonFiniteError, RidgelineError

__all__ = [
    "NetworkSpec",
    "TrainConfig",
    "TrainResult",
    "build_spec",
    "softplus",
    "forward",
    "loss_and_gradient",
    "gauss_newton_hvp",
    "init_weights",
    "train",
    "evaluate_accuracy",
    "batch_schedule",
]

MODES = ("AS", "KLE", "RS", "FS")


def softplus(x):
    # logaddexp(0, x) = log(1 + e^x) without overflow for large |x|
    return np.logaddexp(0.0, x)


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Architecture plus the fixed and initial layers.

    ``input_layer`` is the fixed (r_M, d_M) matrix for projected modes and
    ``None`` for FS, whose input layer is trainable.  ``output_init`` and
    ``bias_init`` seed the trainable output layer and bias.
    """

    d_M: int
    r_M: int
    r_Q: int
    d_Q: int
    mode: str
    input_layer: np.ndarray | None
    output_init: np.ndarray | None
    bias_init: np.ndarray
    hidden: int | None = None
    output_scale: np.ndarray | float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "FS":
            if self.input_layer is not None:
                raise ValueError("FS networks train their input layer; input_layer must be None")
        elif self.input_layer is None or self.input_layer.shape != (self.r_M, self.d_M):
            raise DimensionError(f"input layer must be ({self.r_M}, {self.d_M})")
        if self.output_init is not None and self.output_init.shape != (self.d_Q, self.r_Q):
            raise DimensionError(f"output layer must be ({self.d_Q}, {self.r_Q})")
        if self.bias_init.shape != (self.d_Q,):
            raise DimensionError(f"output bias must have length {self.d_Q}")

    @property
    def width(self):
        return self.hidden or self.r_M

    @property
    def shapes(self):
        h = self.width
        out = [("W0", (self.r_M, self.d_M))] if self.mode == "FS" else []
        out += [("W1", (h, self.r_M)), ("b1", (h,)), ("W2", (self.r_Q, h)), ("b2", (self.r_Q,)),
                ("Phi", (self.d_Q, self.r_Q)), ("bQ", (self.d_Q,))]
        return out

    @property
    def weight_count(self):
        return int(sum(np.prod(s) for _, s in self.shapes))

    def unpack(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.weight_count,):
            raise DimensionError(f"weight vector must have length {self.weight_count}, got {w.shape}")
        out, i = {}, 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            out[name] = w[i:i + n].reshape(shape)
            i += n
        return out

    def pack(self, parts):
        return np.concatenate([np.asarray(parts[name], dtype=float).ravel() for name, _ in self.shapes])


def build_spec(mode, input_basis, output_basis, M_train, Q_train, hidden=None, standardize=True):
    """Assemble a :class:`NetworkSpec` from reduced bases and training data.

    The fixed input layer is ``(V diag(s))^T`` with ``s`` the basis column
    scales.  With ``standardize`` the input layer is further divided by the
    largest training-set std of its coordinates, and the output layer columns
    are scaled by the std of the training outputs along them, so the initial
    network fluctuates on the scale of the data.  For FS, ``input_basis`` is
    the rank (an int) and ``output_basis`` may be ``None`` (Glorot init).
    """
    M_train = np.asarray(M_train, dtype=float)
    Q_train = np.asarray(Q_train, dtype=float)
    d_M, d_Q = M_train.shape[0], Q_train.shape[0]
    bias = Q_train.mean(axis=1)
    Phi = None if output_basis is None else output_basis.matrix
    if mode == "FS":
        r_M = int(input_basis)
        L = None
    else:
        L = np.ascontiguousarray(input_basis.scaled_matrix.T)
        r_M = L.shape[0]
        if standardize:
            sd = np.max((L @ M_train).std(axis=1))
            if sd > 0:
                L = L / sd
    r_Q = Phi.shape[1] if Phi is not None else r_M
    out_scale = 1.0
    if standardize:
        centered = Q_train - bias[:, None]
        if Phi is not None:
            out_scale = (Phi.T @ centered).std(axis=1)
            out_scale = np.where(out_scale > 0, out_scale, 1.0)
        else:
            sd = float(centered.std())
            out_scale = sd if sd > 0 else 1.0
    return NetworkSpec(d_M, r_M, r_Q, d_Q, mode, L, Phi, bias, hidden, out_scale)


def _glorot(rng, shape):
    fan_out, fan_in = shape
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_weights(spec, seed, M=None, Z0=None):
    """Glorot-uniform inner layers from ``seed``; output layer from ``spec``.

    The output layer is ``output_init diag(output_scale)`` (Glorot for FS
    without an output basis).  When training inputs ``M`` (or reduced inputs
    ``Z0``) are given, the output bias is shifted so the initial network
    reproduces ``bias_init`` on average over them.
    """
    rng = np.random.default_rng(seed)
    parts = {}
    for name, shape in spec.shapes:
        if name in ("W0", "W1", "W2"):
            parts[name] = _glorot(rng, shape)
        elif name == "Phi":
            base = spec.output_init if spec.output_init is not None else _glorot(rng, shape)
            parts[name] = base * spec.output_scale
        elif name == "bQ":
            parts[name] = spec.bias_init.copy()
        else:
            parts[name] = np.zeros(shape)
    if M is not None or Z0 is not None:
        Mb = None if M is None else _as_batch(M, spec.d_M)
        cache = _forward_cache(spec, parts, Mb, Z0)
        parts["bQ"] = parts["bQ"] - parts["Phi"] @ cache["Z2"].mean(axis=1)
    return spec.pack(parts)


def _as_batch(X, n):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != n:
        raise DimensionError(f"expected inputs with leading dimension {n}, got {X.shape}")
    return X


def _reduce_inputs(spec, P, M):
    return P["W0"] @ M if spec.mode == "FS" else spec.input_layer @ M


def _forward_cache(spec, P, M, Z0=None):
    if Z0 is None:
        Z0 = _reduce_inputs(spec, P, M)
    A1 = P["W1"] @ Z0 + P["b1"][:, None]
    Z1 = softplus(A1)
    A2 = P["W2"] @ Z1 + P["b2"][:, None]
    Z2 = softplus(A2)
    out = P["Phi"] @ Z2 + P["bQ"][:, None]
    return {"M": M, "Z0": Z0, "A1": A1, "Z1": Z1, "A2": A2, "Z2": Z2, "out": out}


def _backward(spec, P, cache, R):
    """Reverse sweep of residual-like adjoint ``R`` (d_Q, n) into a flat gradient."""
    g = {"Phi": R @ cache["Z2"].T, "bQ": R.sum(axis=1)}
    G2 = (P["Phi"].T @ R) * expit(cache["A2"])
    g["W2"] = G2 @ cache["Z1"].T
    g["b2"] = G2.sum(axis=1)
    G1 = (P["W2"].T @ G2) * expit(cache["A1"])
    g["W1"] = G1 @ cache["Z0"].T
    g["b1"] = G1.sum(axis=1)
    if spec.mode == "FS":
        g["W0"] = (P["W1"].T @ G1) @ cache["M"].T
    return spec.pack(g)


def forward(spec, weights, m):
    """Network output for one input (d_M,) or a batch (d_M, n)."""
    m = np.asarray(m, dtype=float)
    single = m.ndim == 1
    P = spec.unpack(weights)
    out = _forward_cache(spec, P, _as_batch(m, spec.d_M))["out"]
    return out[:, 0] if single else out


def loss_and_gradient(spec, weights, M, Q, Z0=None):
    """``(1/2n) sum ||q_i - f(m_i)||^2`` and its gradient over the trainable weights.

    ``Z0`` optionally supplies precomputed reduced inputs for projected modes.
    """
    M = _as_batch(M, spec.d_M) if M is not None else None
    Q = _as_batch(Q, spec.d_Q)
    n = Q.shape[1]
    if n == 0:
        raise ValueError("empty batch")
    P = spec.unpack(weights)
    cache = _forward_cache(spec, P, M, Z0)
    diff = cache["out"] - Q
    per = np.sum(diff * diff, axis=0)
    if not np.all(np.isfinite(per)):
        i = int(np.flatnonzero(~np.isfinite(per))[0])
        raise NonFiniteError(f"non-finite loss at sample {i}", index=i)
    return 0.5 * float(per.sum()) / n, _backward(spec, P, cache, diff / n)


def _tangent(spec, P, V, cache):
    """Directional derivative of the outputs along weight direction ``V``."""
    dZ0 = V["W0"] @ cache["M"] if spec.mode == "FS" else 0.0
    dA1 = V["W1"] @ cache["Z0"] + V["b1"][:, None]
    if spec.mode == "FS":
        dA1 = dA1 + P["W1"] @ dZ0
    dZ1 = expit(cache["A1"]) * dA1
    dA2 = V["W2"] @ cache["Z1"] + P["W2"] @ dZ1 + V["b2"][:, None]
    dZ2 = expit(cache["A2"]) * dA2
    return V["Phi"] @ cache["Z2"] + P["Phi"] @ dZ2 + V["bQ"][:, None]


def gauss_newton_hvp(spec, weights, M, v, damping=0.0, Z0=None, cache=None):
    """``(1/n) sum_i J_i^T J_i v + damping v`` on the batch ``M``."""
    P = spec.unpack(weights)
    if cache is None:
        cache = _forward_cache(spec, P, _as_batch(M, spec.d_M) if M is not None else None, Z0)
    n = cache["Z0"].shape[1]
    Jv = _tangent(spec, P, spec.unpack(v), cache)
    return _backward(spec, P, cache, Jv / n) + damping * np.asarray(v, dtype=float)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    epochs: int = 100
    seed: int = 0
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    damping: float = 1e-3
    cg_tol: float = 1e-2
    cg_max_iter: int = 50
    gradient_batch: int | None = None
    curvature_batch: int | None = None
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.optimizer not in ("adam", "newtoncg"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def batch_schedule(n_train, cfg=None):
    """Gradient and curvature batch sizes for ``n_train`` samples."""
    if n_train >= 256:
        gb, cb = 128, 16
    else:
        gb, cb = max(1, n_train // 4), max(1, n_train // 32)
    if cfg is not None:
        gb = cfg.gradient_batch or gb
        cb = cfg.curvature_batch or cb
    return min(gb, n_train), min(cb, n_train)


@dataclass
class TrainResult:
    weights: np.ndarray
    history: list = field(default_factory=list)   # rows: (epoch, loss, best_loss, wall_time)
    status: str = "ok"

    @property
    def losses(self):
        return [row[1] for row in self.history]


def _cg(hvp, b, tol, max_iter):
    """Conjugate gradients for H x = b, stopping at ||r|| <= tol ||b||."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    stop = tol**2 * rr
    for _ in range(max_iter):
        if rr <= stop:
            break
        Hp = hvp(p)
        pHp = p @ Hp
        if pHp <= 0:
            break
        alpha = rr / pHp
        x += alpha * p
        r -= alpha * Hp
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x if np.any(x) else b


def train(spec, cfg, M_train, Q_train, weights=None):
    """Minimize the empirical least-squares risk.

    Every epoch visits the training set in seeded random minibatches of the
    gradient batch size.  Adam takes one step per minibatch; Newton-CG solves
    a damped Gauss-Newton system on a curvature sub-batch and backtracks on
    the minibatch loss.  The history records the full training loss after
    each epoch (epoch 0 is the initial loss); weights returned are the best
    seen.  A loss above ``divergence_factor`` times the initial loss stops
    training with status ``"diverged"``.
    """
    Q_train = _as_batch(Q_train, spec.d_Q)
    n = Q_train.shape[1]
    M_train = _as_batch(M_train, spec.d_M)
    if M_train.shape[1] != n:
        raise DimensionError("inputs and outputs have different sample counts")
    rng = np.random.default_rng(cfg.seed)
    # projected modes: the fixed input layer is applied once
    Z0 = None if spec.mode == "FS" else spec.input_layer @ M_train
    if weights is None:
        w = init_weights(spec, cfg.seed, M_train if spec.mode == "FS" else None, Z0)
    else:
        w = np.array(weights, dtype=float)

    def batch(idx):
        return (M_train[:, idx] if spec.mode == "FS" else None,
                Z0[:, idx] if Z0 is not None else None, Q_train[:, idx])

    def full_loss(wv):
        try:
            return loss_and_gradient(spec, wv, M_train if spec.mode == "FS" else None, Q_train, Z0)[0]
        except NonFiniteError:
            return np.inf

    gb, cb = batch_schedule(n, cfg)
    t0 = time.perf_counter()
    loss0 = full_loss(w)
    best_w, best = w.copy(), loss0
    history = [(0, loss0, best, 0.0)]
    m1 = np.zeros_like(w)
    m2 = np.zeros_like(w)
    step = 0
    status = "ok"
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, gb):
            idx = perm[start:start + gb]
            Mb, Zb, Qb = batch(idx)
            loss_b, g = loss_and_gradient(spec, w, Mb, Qb, Zb)
            if cfg.optimizer == "adam":
                step += 1
                b1, b2 = cfg.betas
                m1 = b1 * m1 + (1 - b1) * g
                m2 = b2 * m2 + (1 - b2) * g * g
                mhat = m1 / (1 - b1**step)
                vhat = m2 / (1 - b2**step)
                w = w - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            else:
                ci = idx[:cb]
                Mc, Zc, _ = batch(ci)
                P = spec.unpack(w)
                cache = _forward_cache(spec, P, Mc, Zc)
                d = -_cg(lambda v: gauss_newton_hvp(spec, w, None, v, cfg.damping, cache=cache),
                         g, cfg.cg_tol, cfg.cg_max_iter)
                slope = g @ d
                if slope >= 0:
                    d, slope = -g, -(g @ g)
                alpha = 1.0
                while alpha > 1e-6:
                    trial = w + alpha * d
                    if loss_and_gradient(spec, trial, Mb, Qb, Zb)[0] <= loss_b + 1e-4 * alpha * slope:
                        w = trial
                        break
                    alpha *= 0.5
        loss = full_loss(w)
        if not np.isfinite(loss) or loss > cfg.divergence_factor * loss0:
            history.append((epoch, loss, best, time.perf_counter() - t0))
            status = "diverged"
            break
        if loss < best:
            best, best_w = loss, w.copy()
        history.append((epoch, loss, best, time.perf_counter() - t0))
    return TrainResult(best_w, history, status)


def evaluate_accuracy(spec, weights, M_test, Q_test):
    """Relative error sqrt(sum ||q - f||^2 / sum ||q||^2) and accuracy 100 (1 - error)."""
    Q_test = _as_batch(Q_test, spec.d_Q)
    if Q_test.shape[1] == 0:
        raise ValueError("empty test set")
    denom = float(np.sum(Q_test * Q_test))
    if denom == 0.0:
        raise RidgelineError("relative error undefined: all test outputs are zero")
    pred = forward(spec, weights, _as_batch(M_test, spec.d_M))
    rel = float(np.sqrt(np.sum((Q_test - pred) ** 2) / denom))
    return {"relative_error": rel, "accuracy": 100.0 * (1.0 - rel)}
