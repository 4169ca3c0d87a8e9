"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion summary is
printed at the end of the session.  The CRD experiment (criteria 5-7, 10)
runs at 32 x 32 and takes tens of minutes.
"""
import time

import mpmath
import numpy as np
import pytest

from conftest import record
from oracles import dense_jacobian
from ridgeline.experiment import pipeline
from ridgeline.experiment.config import ExperimentConfig
from ridgeline.gaussianfield import FieldConfig, build, kle
from ridgeline.parametricmap import CrdConfig, CrdMap, LinearMap
from ridgeline.randlinalg import randomized_eigh
from ridgeline.subspaces import (ReducedBasis, RidgeProjectors, bound_check, orthogonalize_rescale, pod,
                                 projection_error)
from ridgeline.surrogate import build_spec, gauss_newton_hvp, init_weights, loss_and_gradient, NetworkSpec

pytestmark = pytest.mark.slow

RANK = 8
N_TRAIN = [64, 128, 256, 512]
EXPERIMENT = {
    "bases": {"ranks": [4, 8, 16]},
    "train": {"n_train": N_TRAIN, "seeds": 10, "modes": ["as", "kle", "rs", "fs"]},
}


def check(number, name, passed, detail):
    record(number, name, passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
    assert passed, detail


def run_experiment(out):
    """Data, bases, training, evaluation and report for the rank-8 accuracy grid."""
    t0 = time.perf_counter()
    ws = pipeline.Workspace(ExperimentConfig(EXPERIMENT), str(out))
    pipeline.generate_data(ws)
    for kind in ("as", "kle", "pod"):
        pipeline.compute_basis(ws, kind)
    cells = pipeline.grid(ws, ranks=[RANK])
    for cell in cells:
        pipeline.evaluate_cell(ws, *cell)
    rep = pipeline.report(ws, expected=cells)
    with open(ws.path("report.json"), "rb") as fh:
        raw = fh.read()
    return ws, rep, raw, time.perf_counter() - t0


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    return run_experiment(tmp_path_factory.mktemp("run-a"))


# -- 1 ---------------------------------------------------------------------------

def test_criterion_01_randomized_eigensolver():
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(30):
        rng = np.random.default_rng([2024, s])
        n = int(rng.integers(20, 101))
        k = int(rng.integers(3, 11))
        rho = rng.uniform(0.3, 0.5)
        U, _ = np.linalg.qr(rng.standard_normal((n, n)))
        A = (U * rho ** np.arange(n)) @ U.T
        ref = np.sort(np.linalg.eigvalsh(A))[::-1][:k]
        res = randomized_eigh(A, k, 5, passes=2, rng=rng)
        worst = max(worst, float(np.max(np.abs(res.eigenvalues - ref) / ref)))
    wall = time.perf_counter() - t0
    check(1, "randomized eigensolver vs dense", worst <= 1e-6 and wall < 10,
          f"max relative eigenvalue error {worst:.2e} (<= 1e-6), {wall:.2f} s (< 10 s)")


# -- 2 ---------------------------------------------------------------------------

def test_criterion_02_kle_constant_mode():
    errs = []
    for gamma, delta in [(0.1, 1.0), (1.0, 5.0)]:
        root = build(FieldConfig(16, 16, gamma, delta))
        b = kle(root, 4, np.random.default_rng(0))
        v = b.matrix[:, 0]
        errs.append(abs(b.eigenvalues[0] - delta**-2) / delta**-2)
        errs.append(float(np.max(np.abs(np.abs(v) - 1 / np.sqrt(root.dim)))))
    worst = max(errs)
    check(2, "KLE leading eigenpair", worst <= 1e-10, f"max eigenvalue/vector error {worst:.2e} (<= 1e-10)")


# -- 3 ---------------------------------------------------------------------------

def test_criterion_03_adjoint():
    t0 = time.perf_counter()
    fm = CrdMap(CrdConfig(nx=32, ny=32))
    prior = build(FieldConfig.mass_consistent(32, 32, 0.1, 1.0))
    rng = np.random.default_rng(3)
    fd_err, pair_err = 0.0, 0.0
    for _ in range(20):
        m, dm = prior.sample(2, rng).T
        w = rng.standard_normal(fm.d_Q)
        eps = 1e-5 * np.linalg.norm(m) / np.linalg.norm(dm)
        fd = (fm.evaluate(m + eps * dm, use_cache=False) - fm.evaluate(m - eps * dm, use_cache=False)) / (2 * eps)
        jd = fm.jacobian_action(m, dm)
        fd_err = max(fd_err, np.linalg.norm(fd - jd) / np.linalg.norm(jd))
        jtw = fm.jacobian_transpose_action(m, w)
        pair_err = max(pair_err, abs(jd @ w - dm @ jtw) / (np.linalg.norm(jd) * np.linalg.norm(w)))
    wall = time.perf_counter() - t0
    check(3, "adjoint exactness", fd_err <= 1e-5 and pair_err <= 1e-10 and wall < 60,
          f"FD error {fd_err:.2e} (<= 1e-5), pairing {pair_err:.2e} (<= 1e-10), {wall:.1f} s (< 60 s)")


# -- 4 ---------------------------------------------------------------------------

def test_criterion_04_pod_identity():
    fm = CrdMap(CrdConfig(nx=32, ny=32))
    prior = build(FieldConfig.mass_consistent(32, 32, 0.1, 1.0))
    M = prior.sample(400, np.random.default_rng(4))
    Q = fm.evaluate_many(M)
    # independent oracle: eigenvalues of the empirical operator (1/N) Q Q^T in 30-digit
    # arithmetic; a double-precision eigensolve of Q Q^T loses the r = 16 tail
    # (lambda_1 / lambda_16 ~ 1e9)
    mpmath.mp.dps = 30
    Qm = mpmath.matrix(Q.tolist())
    lam = np.sort([float(x) for x in mpmath.eigsy(Qm * Qm.T / Q.shape[1], eigvals_only=True)])[::-1]
    worst = 0.0
    for r in (1, 4, 16):
        Phi = pod(Q, r).matrix
        R = Q - Phi @ (Phi.T @ Q)
        emp = np.sum(R * R) / Q.shape[1]
        worst = max(worst, abs(emp - lam[r:].sum()) / lam[r:].sum())
    check(4, "POD trailing-eigenvalue identity", worst <= 1e-8, f"max relative mismatch {worst:.2e} (<= 1e-8)")


# -- 5 ---------------------------------------------------------------------------

def exact_linear_bases(G, root):
    d = root.dim
    Cs = root.apply_Csqrt(np.eye(d))
    S = Cs @ G.T @ G @ Cs
    lam, U = np.linalg.eigh((S + S.T) / 2)
    lam, U = np.clip(lam[::-1], 0, None), U[:, ::-1]
    as_b = ReducedBasis(Cs @ U, lam, "AS", "weighted", root.operator("Cinv"), spectrum=lam, total=lam.sum())
    Cq = G @ root.apply_C(np.eye(d)) @ G.T
    mu, W = np.linalg.eigh((Cq + Cq.T) / 2)
    mu, W = np.clip(mu[::-1], 0, None), W[:, ::-1]
    pod_b = ReducedBasis(W, mu, "POD", "identity", spectrum=mu, total=mu.sum())
    return as_b, pod_b


def test_criterion_05_ridge_bound(experiment):
    t0 = time.perf_counter()
    root = build(FieldConfig(8, 8, 0.1, 1.0))
    G = np.random.default_rng(5).standard_normal((10, root.dim)) / np.sqrt(root.dim)
    as_b, pod_b = exact_linear_bases(G, root)
    lin = bound_check(LinearMap(G), root, as_b, pod_b, 4, 4, n_outer=64, n_inner=256, rng=50)

    ws = experiment[0]
    as_c = pipeline._with_sample_stats(ws, pipeline.load_basis(ws, "as"), "as")
    pod_c = pipeline._with_sample_stats(ws, pipeline.load_basis(ws, "pod"), "pod")
    crd = bound_check(ws.fmap, ws.field, as_c, pod_c, RANK, RANK, n_outer=64, n_inner=256, rng=51)
    wall = time.perf_counter() - t0
    detail = (f"linear LHS {lin.lhs:.3e} vs RHS {lin.rhs:.3e} + 3 SE {3 * lin.combined_se:.1e}; "
              f"CRD LHS {crd.lhs:.3e} vs RHS {crd.rhs:.3e} + 3 SE {3 * crd.combined_se:.1e}; {wall:.0f} s (< 600 s)")
    check(5, "input-output ridge bound", lin.passed and crd.passed and wall < 600, detail)


# -- 6 ---------------------------------------------------------------------------

def test_criterion_06_projection_error_ordering(experiment):
    ws = experiment[0]
    _, _, Mte, Qte = pipeline.load_data(ws)
    Mte, Qte = Mte[:, :256], Qte[:, :256]
    as_b, kle_b, pod_b = (pipeline.load_basis(ws, k) for k in ("as", "kle", "pod"))
    ok, parts = True, []
    for r in (4, 8, 16):
        pa = projection_error(Mte, Qte, RidgeProjectors(as_b.truncate(r), pod_b.truncate(r)), ws.fmap)
        pk = projection_error(Mte, Qte, RidgeProjectors(kle_b.truncate(r), pod_b.truncate(r)), ws.fmap)
        se = float(np.hypot(pa.stderr, pk.stderr))
        gap = pk.mean - pa.mean
        ok &= gap > se
        parts.append(f"r={r}: AS {pa.mean:.4f} KLE {pk.mean:.4f} gap {gap:.4f} > SE {se:.4f}")
    check(6, "AS vs KLE projection error", ok, "; ".join(parts))


# -- 7 ---------------------------------------------------------------------------

def test_criterion_07_surrogate_ordering(experiment):
    _, rep, _, wall = experiment
    acc = {(c["mode"], c["n_train"]): c["accuracy_mean"] for c in rep["accuracy"] if c["rank"] == RANK}
    ok = not rep["gaps"] and wall < 1800
    parts = []
    for n in N_TRAIN:
        a, k, r, f = (acc[(m, n)] for m in ("as", "kle", "rs", "fs"))
        ok &= a >= k >= r
        if n <= 256:
            ok &= a > f
        parts.append(f"N={n}: AS {a:.3f} KLE {k:.3f} RS {r:.3f} FS {f:.3f}")
    check(7, "surrogate accuracy ordering", ok, "; ".join(parts) + f"; {wall / 60:.1f} min (< 30 min)")


# -- 8 ---------------------------------------------------------------------------

def test_criterion_08_mesh_independent_weights():
    counts = {"AS": [], "KLE": [], "RS": [], "FS": []}
    rng = np.random.default_rng(8)
    Q = rng.standard_normal((49, 20))
    out = pod(Q, RANK)
    for nx in (16, 32, 64):
        root = build(FieldConfig.mass_consistent(nx, nx, 0.1, 1.0))
        M = root.sample(20, rng)
        inp = orthogonalize_rescale(root.kle(RANK, rng=rng, tol=None), rescale=False)
        for mode in ("AS", "KLE", "RS"):
            counts[mode].append(build_spec(mode, inp, out, M, Q).weight_count)
        counts["FS"].append(build_spec("FS", RANK, None, M, Q).weight_count)
    same = all(len(set(counts[m])) == 1 for m in ("AS", "KLE", "RS"))
    grows = counts["FS"][0] < counts["FS"][1] < counts["FS"][2]
    check(8, "mesh-independent projected weight count", same and grows,
          f"projected d_W {counts['AS']}, FS d_W {counts['FS']}")


# -- 9 ---------------------------------------------------------------------------

def richardson_gradient(spec, w, M, Q, h=1e-3):
    """Central differences at h and h/2 combined to cancel the O(h^2) term."""
    def central(step):
        out = np.empty_like(w)
        for i in range(w.size):
            e = np.zeros_like(w)
            e[i] = step
            out[i] = (loss_and_gradient(spec, w + e, M, Q)[0] - loss_and_gradient(spec, w - e, M, Q)[0]) / (2 * step)
        return out
    return (4 * central(h / 2) - central(h)) / 3


def test_criterion_09_network_derivatives():
    root = build(FieldConfig.mass_consistent(8, 8, 0.1, 1.0))
    fm = CrdMap(CrdConfig(nx=8, ny=8))
    M = root.sample(32, np.random.default_rng(9))
    Q = fm.evaluate_many(M)
    grad_err = 0.0
    for mode, inp in (("KLE", orthogonalize_rescale(root.kle(4, rng=1), rescale=False)), ("FS", 4)):
        spec = build_spec(mode, inp, pod(Q, 4), M, Q)
        w = init_weights(spec, 3, M=M) + 0.05 * np.random.default_rng(1).standard_normal(spec.weight_count)
        _, g = loss_and_gradient(spec, w, M, Q)
        fd = richardson_gradient(spec, w, M, Q)
        grad_err = max(grad_err, float(np.max(np.abs(fd - g) / np.abs(g))))

    # Gauss-Newton product against the dense matrix built from explicit per-sample Jacobians
    small = NetworkSpec(6, 4, 4, 6, "AS", np.random.default_rng(2).standard_normal((4, 6)),
                        np.linalg.qr(np.random.default_rng(3).standard_normal((6, 4)))[0], np.zeros(6), hidden=6)
    assert small.weight_count <= 200
    Ms = np.random.default_rng(4).standard_normal((6, 12))
    ws_ = init_weights(small, 5)
    J = np.vstack([dense_jacobian(small, ws_, Ms[:, i]) for i in range(12)])
    H = J.T @ J / 12 + 1e-3 * np.eye(small.weight_count)
    hvp_err = 0.0
    for j in range(small.weight_count):
        e = np.zeros(small.weight_count)
        e[j] = 1.0
        col = gauss_newton_hvp(small, ws_, Ms, e, damping=1e-3)
        hvp_err = max(hvp_err, np.linalg.norm(col - H[:, j]) / np.linalg.norm(H[:, j]))
    check(9, "network gradient and Gauss-Newton product", grad_err <= 1e-6 and hvp_err <= 1e-8,
          f"max componentwise gradient error {grad_err:.2e} (<= 1e-6), "
          f"HVP column error {hvp_err:.2e} (<= 1e-8, d_W = {small.weight_count})")


# -- 10 --------------------------------------------------------------------------

def test_criterion_10_determinism(experiment, tmp_path_factory):
    _, _, raw_a, _ = experiment
    _, _, raw_b, _ = run_experiment(tmp_path_factory.mktemp("run-b"))
    check(10, "byte-identical report on rerun", raw_a == raw_b,
          f"report.json {len(raw_a)} bytes vs {len(raw_b)} bytes, identical={raw_a == raw_b}")
