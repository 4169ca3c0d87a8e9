"""Experiment steps: data, bases, training, evaluation, diagnostics and reports.

Every artifact lives under ``<out>/<config hash>/`` and is written once, so
independent (mode, rank, n_train, seed) cells can run as separate jobs.
Random streams are keyed by ``(seed, purpose)`` so each step is reproducible
on its own.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import replace

import numpy as np

from ..errors import ConfigError, NumericalError
from ..gaussianfield import FieldConfig, build
from ..parametricmap import CrdConfig, CrdMap, LinearMap, OscillatoryMap
from ..subspaces import (ReducedBasis, RidgeProjectors, active_subspace, bound_check,
                         orthogonalize_rescale, pod, projection_error, random_basis)
from ..surrogate import TrainConfig, build_spec, evaluate_accuracy, train
from . import store

log = logging.getLogger(__name__)

# stream identifiers for np.random.default_rng([seed, purpose])
_MAP, _DATA, _AS, _KLE, _RS_IN, _RS_OUT, _BOUND = range(1, 8)


class Workspace:
    """Paths and cached objects for one configuration."""

    def __init__(self, cfg, out=None):
        self.cfg = cfg
        self.hash = cfg.hash()
        self.root = os.path.join(out or cfg["out"], self.hash)
        self._field = None
        self._map = None

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def field(self):
        if self._field is None:
            f = self.cfg["field"]
            amp = float(np.sqrt(f["nx"] * f["ny"])) if f["amplitude"] == "mass" else float(f["amplitude"])
            self._field = build(FieldConfig(f["nx"], f["ny"], f["gamma"], f["delta"], amplitude=amp))
        return self._field

    @property
    def fmap(self):
        if self._map is None:
            m, f = self.cfg["map"], self.cfg["field"]
            rng = np.random.default_rng([self.cfg["seed"], _MAP])
            d_M = self.cfg.d_M
            if m["kind"] == "crd":
                self._map = CrdMap(CrdConfig(nx=f["nx"], ny=f["ny"], k_diff=m["k_diff"],
                                             velocity_scale=m["velocity_scale"],
                                             obs_grid=tuple(m["obs_grid"])))
            elif m["kind"] == "linear":
                self._map = LinearMap(rng.standard_normal((m["d_Q"], d_M)) / np.sqrt(d_M))
            else:
                self._map = OscillatoryMap.random(d_M, m["d_Q"], m["width"], m["omega"], rng)
        return self._map

    def write_config(self):
        store.write_text(self.path("config.json"), self.cfg.to_json() + "\n", once=False)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- data --------------------------------------------------------------------

def generate_data(ws):
    """Sample parameters, evaluate the map, and store m.rla / q.rla.

    A failed evaluation is replaced by a fresh draw; more than ``data.retries``
    failures in total raise :class:`NumericalError`.  The last ``data.test``
    columns form the test split.
    """
    if os.path.exists(ws.path("q.rla")):
        return load_data(ws)
    cfg = ws.cfg
    total, retries = cfg["data"]["total"], cfg["data"]["retries"]
    rng = np.random.default_rng([cfg["seed"], _DATA])
    M = ws.field.sample(total, rng)
    Q = np.empty((ws.fmap.d_Q, total))
    failures = 0
    for i in range(total):
        while True:
            try:
                Q[:, i] = ws.fmap.evaluate(M[:, i])
                break
            except NumericalError as exc:
                failures += 1
                log.warning("sample %d failed (%s); redrawing", i, exc)
                if failures > retries:
                    raise NumericalError(f"map failed on {failures} draws, retry cap {retries}") from exc
                M[:, i] = ws.field.sample(1, rng)[:, 0]
    test = cfg["data"]["test"]
    meta = {"config_hash": ws.hash, "total": total, "test": test, "failures": failures,
            "train_indices": [0, total - test], "test_indices": [total - test, total]}
    ws.write_config()
    store.save_array(ws.path("m.rla"), M, meta)
    store.save_array(ws.path("q.rla"), Q, meta)
    return load_data(ws)


def load_data(ws):
    """Return ``(M_pool, Q_pool, M_test, Q_test)``."""
    try:
        M = store.load_array(ws.path("m.rla"))
        Q = store.load_array(ws.path("q.rla"))
    except FileNotFoundError as exc:
        raise ConfigError(f"no data under {ws.root}; run generate-data first") from exc
    n = M.shape[1] - ws.cfg["data"]["test"]
    return M[:, :n], Q[:, :n], M[:, n:], Q[:, n:]


# -- bases -------------------------------------------------------------------

def _save_basis(ws, name, basis, extra=None):
    meta = {"config_hash": ws.hash, "kind": basis.kind, "orthogonality": basis.orthogonality,
            "seed": ws.cfg["seed"], "rank": basis.rank, "total": basis.total,
            "n_samples": basis.provenance.get("n_samples")}
    meta.update(extra or {})
    store.save_array(ws.path(f"basis-{name}.rla"), basis.matrix, meta)
    store.save_array(ws.path(f"basis-{name}-eigenvalues.rla"), basis.eigenvalues)
    if basis.center is not None:
        store.save_array(ws.path(f"basis-{name}-center.rla"), basis.center)
    if basis.spectrum is not None:
        store.save_array(ws.path(f"basis-{name}-spectrum.rla"), basis.spectrum)
    rows = [(ws.hash, i + 1, repr(float(v))) for i, v in enumerate(basis.eigenvalues)]
    store.write_text(ws.path(f"basis-{name}-eigenvalues.csv"),
                     _csv(["config_hash", "index", "eigenvalue"], rows))


def load_basis(ws, name):
    path = ws.path(f"basis-{name}.rla")
    try:
        V = store.load_array(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"basis {name!r} not found under {ws.root}; run compute-basis first") from exc
    meta = store.load_meta(path)
    vals = store.load_array(ws.path(f"basis-{name}-eigenvalues.rla"))
    opt = {}
    for key in ("center", "spectrum"):
        p = ws.path(f"basis-{name}-{key}.rla")
        if os.path.exists(p):
            opt[key] = store.load_array(p)
    weight = ws.field.operator("Cinv") if meta["orthogonality"] == "weighted" else None
    return ReducedBasis(V, vals, meta["kind"], meta["orthogonality"], weight, total=meta["total"],
                        provenance={"n_samples": meta.get("n_samples")}, **opt)


def compute_basis(ws, kind):
    """Compute and store the ``as``, ``kle`` or ``pod`` basis at the largest configured rank."""
    cfg = ws.cfg
    r = max(cfg.ranks)
    b = cfg["bases"]
    if os.path.exists(ws.path(f"basis-{kind}.rla")):
        return load_basis(ws, kind)
    ws.write_config()
    if kind == "as":
        rng = np.random.default_rng([cfg["seed"], _AS])
        basis = active_subspace(ws.fmap, ws.field, b["as_samples"], r, b["oversampling"], rng=rng)
        # trailing-sum standard errors need the per-sample contributions
        store.save_array(ws.path("basis-as-trace.rla"), basis.provenance["per_sample_trace"])
        store.save_array(ws.path("basis-as-energy.rla"), basis.provenance["per_sample_energy"])
    elif kind == "kle":
        basis = ws.field.kle(r, rng=np.random.default_rng([cfg["seed"], _KLE]), p=b["oversampling"])
    elif kind == "pod":
        _, Q, _, _ = load_data(ws)
        n = min(b["pod_samples"], Q.shape[1])
        basis = pod(Q[:, :n], r)
    else:
        raise ConfigError(f"unknown basis kind {kind!r}")
    _save_basis(ws, kind, basis)
    return load_basis(ws, kind)


def random_bases(ws, rank, seed):
    """Seeded random input and output bases for the RS network of ``seed``."""
    vin = random_basis(ws.cfg.d_M, rank, np.random.default_rng([seed, _RS_IN]), "RandomInput")
    vout = random_basis(ws.cfg.d_Q, rank, np.random.default_rng([seed, _RS_OUT]), "RandomOutput")
    return vin, vout


def _with_sample_stats(ws, basis, name):
    """Reattach per-sample trailing-sum contributions saved with a basis."""
    prov = dict(basis.provenance)
    if name == "as":
        prov["per_sample_trace"] = store.load_array(ws.path("basis-as-trace.rla"))
        prov["per_sample_energy"] = store.load_array(ws.path("basis-as-energy.rla"))
    elif name == "pod":
        _, Q, _, _ = load_data(ws)
        Qp = Q[:, :prov["n_samples"]]
        prov["per_sample_trace"] = np.sum(Qp * Qp, axis=0)
        prov["per_sample_energy"] = ((basis.matrix.T @ Qp) ** 2).T
    return replace(basis, provenance=prov)


# -- networks ----------------------------------------------------------------

def cell_name(mode, rank, n_train, seed):
    return f"{mode}-r{rank}-n{n_train}-s{seed}"


def network_spec(ws, mode, rank, n_train, seed):
    M, Q, _, _ = load_data(ws)
    Mtr, Qtr = M[:, :n_train], Q[:, :n_train]
    rescale = ws.cfg["bases"]["rescale"]
    if mode == "fs":
        return build_spec("FS", rank, None, Mtr, Qtr), Mtr, Qtr
    if mode == "rs":
        vin, vout = random_bases(ws, rank, seed)
    else:
        vin = orthogonalize_rescale(load_basis(ws, mode).truncate(rank), rescale=rescale)
        vout = load_basis(ws, "pod").truncate(rank)
    return build_spec(mode.upper(), vin, vout, Mtr, Qtr), Mtr, Qtr


def train_cell(ws, mode, rank, n_train, seed):
    """Train one network and store weights, spec record and history CSV."""
    name = cell_name(mode, rank, n_train, seed)
    wpath = ws.path("nets", f"{name}.rla")
    spec, Mtr, Qtr = network_spec(ws, mode, rank, n_train, seed)
    if os.path.exists(wpath):
        return spec, store.load_array(wpath)
    t = ws.cfg["train"]
    tc = TrainConfig(optimizer=t["optimizer"], epochs=t["epochs"], seed=seed)
    res = train(spec, tc, Mtr, Qtr)
    meta = {"config_hash": ws.hash, "mode": mode, "rank": rank, "n_train": n_train, "seed": seed,
            "d_M": spec.d_M, "r_M": spec.r_M, "r_Q": spec.r_Q, "d_Q": spec.d_Q, "d_W": spec.weight_count,
            "optimizer": tc.optimizer, "epochs": tc.epochs, "status": res.status}
    rows = [(ws.hash, e, repr(loss), f"{wall:.6f}") for e, loss, _, wall in res.history]
    store.write_text(ws.path("nets", f"{name}-history.csv"),
                     _csv(["config_hash", "epoch", "loss", "wall_time"], rows))
    store.save_array(wpath, res.weights, meta)
    return spec, res.weights


def evaluate_cell(ws, mode, rank, n_train, seed):
    """Metrics row for one trained network (trains it first if needed)."""
    t0 = time.perf_counter()
    spec, w = train_cell(ws, mode, rank, n_train, seed)
    _, _, Mte, Qte = load_data(ws)
    acc = evaluate_accuracy(spec, w, Mte, Qte)
    row = {"config_hash": ws.hash, "mode": mode, "rank": rank, "n_train": n_train, "seed": seed,
           "relative_error": acc["relative_error"], "accuracy": acc["accuracy"],
           "d_W": spec.weight_count, "wall_time": time.perf_counter() - t0}
    path = ws.path("metrics", f"{cell_name(mode, rank, n_train, seed)}.json")
    if not os.path.exists(path):
        store.write_json(path, row)
    return row


def grid(ws, modes=None, ranks=None, n_trains=None, seeds=None):
    t = ws.cfg["train"]
    modes = modes or t["modes"]
    ranks = ranks or ws.cfg.ranks
    n_trains = n_trains or t["n_train"]
    seeds = seeds if seeds is not None else [ws.cfg.seed_for(i) for i in range(t["seeds"])]
    return [(mo, r, n, s) for r in ranks for n in n_trains for mo in modes for s in seeds]


# -- diagnostics -------------------------------------------------------------

def projection_errors(ws, modes=("as", "kle", "rs"), ranks=None):
    """Projection-error table over ``ranks`` on the first test samples."""
    _, _, Mte, Qte = load_data(ws)
    n = min(ws.cfg["bases"]["projection_samples"], Mte.shape[1])
    Mte, Qte = Mte[:, :n], Qte[:, :n]
    ranks = ranks or ws.cfg.ranks
    out = []
    pod_b = load_basis(ws, "pod")
    for r in ranks:
        for mode in modes:
            if mode == "rs":
                vin, vout = random_bases(ws, r, ws.cfg["seed"])
            else:
                vin, vout = load_basis(ws, mode).truncate(r), pod_b.truncate(r)
            pe = projection_error(Mte, Qte, RidgeProjectors(vin, vout), ws.fmap,
                                  input_projector=ws.cfg["bases"]["input_projector"])
            out.append({"config_hash": ws.hash, "mode": mode, "rank": r, "mean": pe.mean,
                        "stderr": pe.stderr, "n": pe.n, "n_failed": pe.n_failed})
    store.write_json(ws.path("projection_error.json"), out, once=False)
    store.write_text(ws.path("projection_error.csv"),
                     _csv(["config_hash", "mode", "rank", "mean", "stderr", "n", "n_failed"],
                          [[row[k] for k in ("config_hash", "mode", "rank", "mean", "stderr", "n", "n_failed")]
                           for row in out]), once=False)
    return out


def run_bound_check(ws, rank=None):
    b = ws.cfg["bases"]
    r = rank or min(ws.cfg.ranks)
    as_b = _with_sample_stats(ws, load_basis(ws, "as"), "as")
    pod_b = _with_sample_stats(ws, load_basis(ws, "pod"), "pod")
    rep = bound_check(ws.fmap, ws.field, as_b, pod_b, r, r, b["bound_outer"], b["bound_inner"],
                      rng=np.random.default_rng([ws.cfg["seed"], _BOUND]))
    row = {"config_hash": ws.hash, **rep.as_dict()}
    store.write_json(ws.path("bound_check.json"), [row], once=False)
    return row


# -- report ------------------------------------------------------------------

def _read_rows(ws):
    d = ws.path("metrics")
    if not os.path.isdir(d):
        return []
    rows = []
    for name in sorted(os.listdir(d)):
        if name.endswith(".json"):
            with open(os.path.join(d, name), encoding="utf-8") as fh:
                rows.append(json.load(fh))
    return rows


def aggregate(rows, expected_seeds=None):
    """Mean and sample std over seeds for each (mode, rank, n_train) cell.

    Cells missing some of ``expected_seeds`` are listed in ``gaps``.
    """
    cells = {}
    for row in rows:
        cells.setdefault((row["mode"], row["rank"], row["n_train"]), []).append(row)
    table, gaps = [], []
    for (mode, rank, n_train), rs in sorted(cells.items()):
        rs = sorted(rs, key=lambda x: x["seed"])
        acc = np.array([x["accuracy"] for x in rs])
        rel = np.array([x["relative_error"] for x in rs])
        sd = (lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0)
        table.append({"config_hash": rs[0]["config_hash"], "mode": mode, "rank": rank, "n_train": n_train,
                      "n_seeds": len(rs), "accuracy_mean": float(acc.mean()), "accuracy_std": sd(acc),
                      "relative_error_mean": float(rel.mean()), "relative_error_std": sd(rel),
                      "d_W": rs[0]["d_W"]})
        if expected_seeds is not None:
            missing = sorted(set(expected_seeds) - {x["seed"] for x in rs})
            if missing:
                gaps.append({"mode": mode, "rank": rank, "n_train": n_train, "missing_seeds": missing})
    return table, gaps


def report(ws, expected=None):
    """Write report.json and report.csv; wall times are left out so reruns match byte for byte."""
    rows = _read_rows(ws)
    t = ws.cfg["train"]
    seeds = [ws.cfg.seed_for(i) for i in range(t["seeds"])]
    table, gaps = aggregate(rows, seeds)
    present = {(c["mode"], c["rank"], c["n_train"]) for c in table}
    for mode, rank, n_train, _ in (expected if expected is not None else grid(ws)):
        if (mode, rank, n_train) not in present:
            gap = {"mode": mode, "rank": rank, "n_train": n_train, "missing_seeds": seeds}
            if gap not in gaps:
                gaps.append(gap)
    out = {"config_hash": ws.hash, "status": "ok" if table else "no data", "accuracy": table,
           "gaps": gaps}
    for name in ("projection_error", "bound_check"):
        p = ws.path(f"{name}.json")
        if os.path.exists(p):
            with open(p, encoding="utf-8") as fh:
                out[name] = json.load(fh)
    store.write_json(ws.path("report.json"), out, once=False)
    header = ["config_hash", "mode", "rank", "n_train", "n_seeds", "accuracy_mean", "accuracy_std",
              "relative_error_mean", "relative_error_std", "d_W"]
    lines = [[c[k] for k in header] for c in table]
    if not table:
        lines = [[ws.hash, "no data"] + [""] * (len(header) - 2)]
    store.write_text(ws.path("report.csv"), _csv(header, lines), once=False)
    return out
