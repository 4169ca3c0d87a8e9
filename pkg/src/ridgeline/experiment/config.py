"""Experiment configuration: a versioned JSON key/value tree.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
command-line flags.  A file only needs the keys it changes; unknown keys
are rejected so typos surface as configuration errors.

Schema (version 1)::

    {"version": 1, "seed": 0,
     "map":   {"kind": "crd" | "linear" | "oscillatory", "k_diff": 0.1,
               "velocity_scale": 1.0, "obs_grid": [7, 7], "d_Q": 49,
               "width": 16, "omega": 1.0},
     "field": {"nx": 32, "ny": 32, "gamma": 0.1, "delta": 1.0, "amplitude": "mass"},
     "data":  {"total": 2048, "test": 512, "retries": 8},
     "bases": {"as_samples": 256, "pod_samples": 400, "ranks": [8, 32, 64, 128],
               "oversampling": 10, "rescale": false, "input_projector": "native",
               "projection_samples": 256, "bound_outer": 64, "bound_inner": 256},
     "train": {"n_train": [64, 128, 256, 512, 1024, 1536], "seeds": 10, "base_seed": 0,
               "modes": ["as", "kle", "rs", "fs"], "optimizer": "adam", "epochs": 2000},
     "out": "runs"}

``field.amplitude`` is a number or ``"mass"`` for the grid-consistent
amplitude sqrt(nx ny).
"""
from __future__ import annotations

import copy
import hashlib
import json
import warnings

from ..errors import ConfigError

VERSION = 1

DEFAULTS = {
    "version": VERSION,
    "seed": 0,
    "map": {"kind": "crd", "k_diff": 0.1, "velocity_scale": 1.0, "obs_grid": [7, 7],
            "d_Q": 49, "width": 16, "omega": 1.0},
    "field": {"nx": 32, "ny": 32, "gamma": 0.1, "delta": 1.0, "amplitude": "mass"},
    "data": {"total": 2048, "test": 512, "retries": 8},
    "bases": {"as_samples": 256, "pod_samples": 400, "ranks": [8, 32, 64, 128], "oversampling": 10,
              "rescale": False, "input_projector": "native", "projection_samples": 256,
              "bound_outer": 64, "bound_inner": 256},
    "train": {"n_train": [64, 128, 256, 512, 1024, 1536], "seeds": 10, "base_seed": 0,
              "modes": ["as", "kle", "rs", "fs"], "optimizer": "adam", "epochs": 2000},
    "out": "runs",
}

MODES = ("as", "kle", "rs", "fs")


def _merge(base, update, path=""):
    for key, val in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            _merge(base[key], val, where)
        else:
            base[key] = val


class ExperimentConfig:
    """Validated configuration tree with attribute-free dict access.

    ``cfg["train"]["epochs"]`` reads a value; :meth:`hash` identifies the
    experiment and ignores the output directory.
    """

    def __init__(self, tree=None):
        self.tree = copy.deepcopy(DEFAULTS)
        if tree:
            _merge(self.tree, tree)
        self._validate()

    @classmethod
    def load(cls, path=None, overrides=None):
        tree = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    tree = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(tree, dict):
                raise ConfigError("config file must hold a JSON object")
        cfg = cls(tree)
        if overrides:
            cfg = cfg.with_overrides(overrides)
        return cfg

    def with_overrides(self, overrides):
        """New config with dotted-key overrides, e.g. ``{"train.epochs": 10}``."""
        tree = copy.deepcopy(self.tree)
        for dotted, val in overrides.items():
            node = tree
            *head, last = dotted.split(".")
            for k in head:
                if k not in node or not isinstance(node[k], dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[k]
            if last not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[last] = val
        return ExperimentConfig(tree)

    def __getitem__(self, key):
        return self.tree[key]

    def _validate(self):
        t = self.tree
        if t["version"] != VERSION:
            raise ConfigError(f"unsupported config version {t['version']!r} (expected {VERSION})")
        if t["map"]["kind"] not in ("crd", "linear", "oscillatory"):
            raise ConfigError(f"unknown map kind {t['map']['kind']!r}")
        d = t["data"]
        if d["test"] < 1 or d["total"] <= d["test"]:
            raise ConfigError("need 1 <= data.test < data.total")
        tr = t["train"]
        bad = [n for n in tr["n_train"] if n < 1 or n + d["test"] > d["total"]]
        if bad:
            raise ConfigError(f"n_train values {bad} do not fit: need n_train + test <= total ({d['total']})")
        if tr["seeds"] < 1:
            raise ConfigError("train.seeds must be >= 1")
        unknown = [m for m in tr["modes"] if m not in MODES]
        if unknown:
            raise ConfigError(f"unknown modes {unknown}")
        if tr["optimizer"] not in ("adam", "newtoncg"):
            raise ConfigError(f"unknown optimizer {tr['optimizer']!r}")
        b = t["bases"]
        if not b["ranks"] or min(b["ranks"]) < 1:
            raise ConfigError("bases.ranks must be a non-empty list of positive ranks")
        if b["input_projector"] not in ("native", "orthogonal"):
            raise ConfigError(f"unknown input projector {b['input_projector']!r}")
        amp = t["field"]["amplitude"]
        if amp != "mass" and not (isinstance(amp, (int, float)) and amp > 0):
            raise ConfigError("field.amplitude must be 'mass' or a positive number")

    @property
    def d_M(self):
        f = self.tree["field"]
        return (f["nx"] + 1) * (f["ny"] + 1)

    @property
    def d_Q(self):
        m = self.tree["map"]
        if m["kind"] == "crd":
            return m["obs_grid"][0] * m["obs_grid"][1]
        return m["d_Q"]

    def clamp_rank(self, r):
        """Rank limited to min(d_M, d_Q), with a warning when clamped."""
        cap = min(self.d_M, self.d_Q)
        if r > cap:
            warnings.warn(f"rank {r} exceeds min(d_M, d_Q) = {cap}; clamped")
            return cap
        return int(r)

    @property
    def ranks(self):
        out = []
        for r in self.tree["bases"]["ranks"]:
            r = self.clamp_rank(r)
            if r not in out:
                out.append(r)
        return out

    def seed_for(self, index):
        return int(self.tree["train"]["base_seed"]) + int(index)

    def canonical(self):
        tree = {k: v for k, v in self.tree.items() if k != "out"}
        return json.dumps(tree, sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def to_json(self):
        return json.dumps(self.tree, sort_keys=True, indent=2)
