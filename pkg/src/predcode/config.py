"""Experiment configuration: nested JSON documents with strict validation.

Every key has a default in :data:`DEFAULTS`; a document may override any
subset. Unknown keys, wrong types and out-of-range numbers are rejected when
the document is parsed. ``--override a.b=value`` style edits are applied
before validation; the value is read as JSON and falls back to a plain string.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .activations import ACTIVATIONS
from .errors import PredCodeError

KINDS = ("train", "classify", "generate", "kalman-compare", "backprop-compare", "pid-compare",
         "precision-study")

DEFAULTS: dict = {
    "kind": "train",
    "seed": 0,
    "out": "metrics.jsonl",
    "network": {
        "layer_dims": [10, 128, 128, 784],
        "activations": ["identity", "rectifier", "rectifier"],
        "step_size": 0.1,
        "max_iters": 500,
        "tol": 1e-6,
    },
    "clamp_mode": "supervised_backward",
    "relaxation": {"use_psi": False, "drop_derivative": False, "use_zeta": False},
    "precision_mode": "fixed",
    "dataset": {
        "source": "synthetic",
        "images": None,
        "labels": None,
        "n_train": 2000,
        "n_test": 1000,
        "noise": 0.3,
    },
    "training": {
        "epochs": 30,
        "batch_size": 20,
        "lr": 0.2,
        "anneal": 0.5,
        "n_iters": 20,
        "weight_decay": 1e-4,
        "precision_lr": 0.01,
        "precision_rule": "error",
        "label_smoothing": 0.0,
    },
    "model": {"load": None, "save": None},
    "kalman": {"n": 4, "m": 1, "p": 3, "steps": 100, "systems": 1},
    "backprop": {"graph": "mlp", "dims": [8, 16, 12, 6], "activation": "tanh", "eta": 0.5,
                 "schedule": "jacobi", "path": None},
    "pid": {"steps": 10000, "dt": 0.01, "setpoint": 1.0, "precisions": [1.0, 2.0, 0.1],
            "disturbance": [[0.25, 1.0], [0.6, -0.5]], "noise": 0.0},
    "precision_study": {"eps": [1.0, 8.0, 27.0], "eta": 0.05, "samples": 100000},
    "metrics": {"wall_clock": False},
}

_NULLABLE = {("dataset", "images"), ("dataset", "labels"), ("model", "load"), ("model", "save"),
             ("backprop", "path")}


class ConfigError(PredCodeError, ValueError):
    """Invalid configuration document (maps to exit status 2)."""


def _merge(base: dict, doc: dict, path=()) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be a mapping")
    out = copy.deepcopy(base)
    for key, val in doc.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(where)!r}")
        default = base[key]
        if isinstance(default, dict):
            out[key] = _merge(default, val, where)
            continue
        out[key] = _coerce(val, default, where)
    return out


def _coerce(val, default, where):
    name = ".".join(where)
    if val is None:
        if tuple(where) in _NULLABLE:
            return None
        raise ConfigError(f"{name} may not be null")
    if default is None:
        if not isinstance(val, str):
            raise ConfigError(f"{name} must be a string path")
        return val
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{name} must be true or false")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{name} must be an integer")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"{name} must be a string")
        return val
    if isinstance(default, list):
        if not isinstance(val, list):
            raise ConfigError(f"{name} must be a list")
        return val
    raise ConfigError(f"cannot interpret {name}")


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted!r} does not name a nested key")
    node[keys[-1]] = value


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _positive_ints(xs, name):
    _require(isinstance(xs, list) and len(xs) > 0 and all(isinstance(x, int) and not isinstance(x, bool)
                                                           and x >= 1 for x in xs),
             f"{name} must be a non-empty list of positive integers")


def validate(cfg: dict) -> None:
    """Range checks that go beyond types."""
    _require(cfg["kind"] in KINDS, f"kind must be one of {KINDS}")
    _require(0 <= cfg["seed"] < 2 ** 64, "seed must be an unsigned 64-bit integer")
    net = cfg["network"]
    _positive_ints(net["layer_dims"], "network.layer_dims")
    _require(len(net["layer_dims"]) >= 2, "network.layer_dims needs at least two layers")
    _require(len(net["activations"]) == len(net["layer_dims"]) - 1,
             "network.activations needs one entry per predicted layer")
    _require(all(a in ACTIVATIONS for a in net["activations"]),
             f"network.activations entries must be in {sorted(ACTIVATIONS)}")
    _require(net["step_size"] > 0 and net["tol"] > 0 and net["max_iters"] >= 1,
             "network.step_size, tol must be > 0 and max_iters >= 1")
    _require(cfg["clamp_mode"] in ("unsupervised", "supervised_forward", "supervised_backward"),
             "clamp_mode is not recognised")
    _require(cfg["precision_mode"] in ("fixed", "diagonal_learned", "full_learned"),
             "precision_mode is not recognised")
    ds = cfg["dataset"]
    _require(ds["source"] in ("synthetic", "idx"), "dataset.source must be 'synthetic' or 'idx'")
    if ds["source"] == "idx":
        _require(ds["images"] is not None and ds["labels"] is not None,
                 "dataset.images and dataset.labels are required for idx data")
    _require(ds["n_train"] >= 1 and ds["n_test"] >= 1, "dataset sizes must be >= 1")
    _require(ds["noise"] >= 0, "dataset.noise must be >= 0")
    tr = cfg["training"]
    _require(tr["epochs"] >= 1 and tr["batch_size"] >= 1 and tr["n_iters"] >= 1,
             "training.epochs, batch_size and n_iters must be >= 1")
    _require(tr["lr"] > 0 and tr["precision_lr"] > 0, "training learning rates must be > 0")
    _require(0 <= tr["anneal"] < 1, "training.anneal must lie in [0, 1)")
    _require(tr["weight_decay"] >= 0, "training.weight_decay must be >= 0")
    _require(tr["precision_rule"] in ("error", "gradient"), "training.precision_rule must be error or gradient")
    _require(0 <= tr["label_smoothing"] < 1, "training.label_smoothing must lie in [0, 1)")
    km = cfg["kalman"]
    _require(all(km[k] >= 1 for k in ("n", "m", "p", "steps", "systems")), "kalman sizes must be >= 1")
    bp = cfg["backprop"]
    _require(bp["graph"] in ("mlp", "chain", "diamond", "file"), "backprop.graph is not recognised")
    _positive_ints(bp["dims"], "backprop.dims")
    _require(bp["activation"] in ACTIVATIONS, "backprop.activation is not recognised")
    _require(0 < bp["eta"] <= 1, "backprop.eta must lie in (0, 1]")
    _require(bp["schedule"] in ("jacobi", "sequential"), "backprop.schedule must be jacobi or sequential")
    if bp["graph"] == "file":
        _require(bp["path"] is not None, "backprop.path is required when graph is 'file'")
    pid = cfg["pid"]
    _require(pid["steps"] >= 3 and pid["dt"] > 0, "pid.steps must be >= 3 and pid.dt > 0")
    _require(len(pid["precisions"]) == 3 and all(isinstance(p, (int, float)) and p >= 0 for p in pid["precisions"]),
             "pid.precisions must be three non-negative numbers")
    _require(all(isinstance(d, list) and len(d) == 2 and 0 <= d[0] <= 1 for d in pid["disturbance"]),
             "pid.disturbance entries must be [fraction, level] pairs")
    _require(pid["noise"] >= 0, "pid.noise must be >= 0")
    ps = cfg["precision_study"]
    _require(len(ps["eps"]) >= 1 and all(isinstance(e, (int, float)) for e in ps["eps"]),
             "precision_study.eps must be a list of numbers")
    _require(0 < ps["eta"] < 1, "precision_study.eta must lie in (0, 1)")
    _require(ps["samples"] >= 100, "precision_study.samples must be >= 100")


@dataclass
class ExperimentConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def kind(self) -> str:
        return self.data["kind"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @classmethod
    def from_dict(cls, doc: dict | None = None, overrides=(), **top) -> "ExperimentConfig":
        doc = copy.deepcopy(doc or {})
        for k, v in top.items():
            if v is not None:
                doc[k] = v
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            _set_path(doc, key, value)
        merged = _merge(DEFAULTS, doc)
        validate(merged)
        return cls(merged)

    @classmethod
    def load(cls, path, overrides=(), **top) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, overrides, **top)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)
