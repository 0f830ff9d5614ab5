"""Experiment suites and the metrics stream.

Each suite is a generator of :class:`MetricsRecord` objects. The runner
validates everything that can fail before the metrics file is opened, so a
bad configuration leaves no output behind. Exit statuses: 0 success,
2 validation failure, 3 numerical divergence.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics, graph as gpc, kalman
from .config import ConfigError, ExperimentConfig
from .data import load_mnist_subset, one_hot, simulate_ssm, synth_classification
from .errors import DivergenceError, NumericalError, PredCodeError
from .network import NetworkParams, NetworkSpec
from .precision import PrecisionMode, empirical_fixed_point_check, integrate_fixed_point, precision_step
from .relaxed import RelaxationFlags
from .training import (ClampMode, LabeledBatch, TrainConfig, accuracy, classify, evaluate_free_energy,
                       generate, train_epoch)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


@dataclass
class MetricsRecord:
    step: int
    free_energy: float | None = None
    layer_error_norms: list = field(default_factory=list)
    task_metric: float | None = None
    wall_ms: int | None = None
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "step": self.step,
            "free_energy": _num(self.free_energy),
            "layer_error_norms": [_num(x) for x in self.layer_error_norms],
            "task_metric": _num(self.task_metric),
            "wall_ms": self.wall_ms,
        }
        if self.detail:
            doc["detail"] = {k: _num(v) if isinstance(v, (float, np.floating)) else v
                             for k, v in self.detail.items()}
        return json.dumps(doc)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# shared builders


def build_network(cfg: ExperimentConfig):
    net = cfg["network"]
    spec = NetworkSpec(net["layer_dims"], net["activations"], step_size=net["step_size"],
                       max_iters=net["max_iters"], tol=net["tol"])
    mode_tag = cfg["clamp_mode"]
    label_dim = None
    if mode_tag == "supervised_backward":
        label_dim = spec.layer_dims[0]
    elif mode_tag == "supervised_forward":
        label_dim = spec.layer_dims[-1]
    mode = ClampMode(mode_tag, label_dim)
    return spec, mode


def build_train_config(cfg: ExperimentConfig) -> TrainConfig:
    tr = cfg["training"]
    return TrainConfig(batch_size=tr["batch_size"], lr=tr["lr"], n_iters=tr["n_iters"],
                       weight_decay=tr["weight_decay"], precision_mode=PrecisionMode(cfg["precision_mode"]),
                       precision_lr=tr["precision_lr"], precision_rule=tr["precision_rule"],
                       anneal=tr["anneal"])


def load_dataset(cfg: ExperimentConfig, spec: NetworkSpec, mode: ClampMode, rng):
    """Returns ``(x_train, y_train, x_test, y_test)``; labels are integer classes."""
    ds = cfg["dataset"]
    data_dim = spec.layer_dims[mode.data_layer(spec)]
    n_classes = mode.label_dim or 10
    if ds["source"] == "idx":
        xtr, ytr, xte, yte = load_mnist_subset(ds["images"], ds["labels"], ds["n_train"], ds["n_test"],
                                               seed=int(rng.integers(2 ** 32)))
        if xtr.shape[1] != data_dim:
            raise ConfigError(f"images have {xtr.shape[1]} pixels but the data layer has {data_dim} units")
        if mode.supervised and ytr.max(initial=0) >= n_classes:
            raise ConfigError(f"labels go up to {ytr.max()} but the label layer has {n_classes} units")
        return xtr, ytr, xte, yte
    xtr, ytr, protos = synth_classification(rng, ds["n_train"], data_dim, n_classes, ds["noise"])
    xte, yte, _ = synth_classification(rng, ds["n_test"], data_dim, n_classes, ds["noise"], protos)
    return xtr, ytr, xte, yte


def build_flags(cfg: ExperimentConfig, spec: NetworkSpec, rng):
    rl = cfg["relaxation"]
    if not (rl["use_psi"] or rl["drop_derivative"] or rl["use_zeta"]):
        return None
    return RelaxationFlags.init(spec, rl["use_psi"], rl["drop_derivative"], rl["use_zeta"], rng=rng)


def save_params(path, params: NetworkParams) -> None:
    arrays = {f"theta{l}": t for l, t in enumerate(params.theta) if t is not None}
    arrays.update({f"precision{l}": p for l, p in enumerate(params.precision)})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path, spec: NetworkSpec) -> NetworkParams:
    try:
        with np.load(path) as z:
            theta = [None] + [z[f"theta{l}"] for l in range(1, spec.n_layers + 1)]
            precision = [z[f"precision{l}"] for l in range(spec.n_layers + 1)]
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load parameters from {path}: {exc}") from None
    for l in range(1, spec.n_layers + 1):
        if theta[l].shape != (spec.layer_dims[l - 1], spec.layer_dims[l]):
            raise ConfigError(f"stored theta{l} does not match network.layer_dims")
    return NetworkParams(theta, precision)


# ---------------------------------------------------------------------------
# suites; each receives the config and the run's single generator


class _Learning:
    """Prepared state shared by the train / classify / generate suites."""

    def __init__(self, cfg: ExperimentConfig, rng):
        self.cfg = cfg
        self.spec, self.mode = build_network(cfg)
        self.tcfg = build_train_config(cfg)
        self.data = load_dataset(cfg, self.spec, self.mode, rng)
        self.params = (load_params(cfg["model"]["load"], self.spec) if cfg["model"]["load"]
                       else NetworkParams.init(self.spec, rng, diagonal="auto"))
        self.flags = build_flags(cfg, self.spec, rng)
        self.rng = rng
        smoothing = cfg["training"]["label_smoothing"]
        n_classes = self.mode.label_dim or 10
        xtr, ytr, xte, yte = self.data
        self.ytr_hot = one_hot(ytr, n_classes, smoothing) if self.mode.supervised else None
        self.yte_hot = one_hot(yte, n_classes) if self.mode.supervised else None

    def eval_batch(self, n: int = 100) -> LabeledBatch:
        xte = self.data[2][:n]
        return LabeledBatch(xte, None if self.yte_hot is None else self.yte_hot[:n])

    def task_metric(self):
        xte, yte = self.data[2], self.data[3]
        if self.mode.supervised:
            return accuracy(xte, yte, self.params, self.spec, self.mode, self.flags)
        # unsupervised: mean free energy of held-out items
        return evaluate_free_energy(self.eval_batch(), self.params, self.spec, self.mode, self.tcfg,
                                    self.flags)[0]

    def epoch_records(self, quiet: bool = False):
        epochs = self.cfg["training"]["epochs"]
        xtr = self.data[0]
        for ep in range(epochs):
            lr = self.tcfg.lr_at(ep, epochs)
            F = train_epoch(xtr, self.ytr_hot, self.params, self.spec, self.mode, replace(self.tcfg, lr=lr),
                            self.rng, self.flags)
            if quiet:
                continue
            _, norms = evaluate_free_energy(self.eval_batch(), self.params, self.spec, self.mode, self.tcfg,
                                            self.flags)
            yield MetricsRecord(ep + 1, F, norms, self.task_metric(), detail={"lr": lr})

    def train_silently(self):
        if self.cfg["model"]["load"]:
            return
        for _ in self.epoch_records(quiet=True):
            pass

    def maybe_save(self):
        if self.cfg["model"]["save"]:
            save_params(self.cfg["model"]["save"], self.params)


def suite_train(cfg, rng, prep):
    yield from prep.epoch_records()
    prep.maybe_save()


def suite_classify(cfg, rng, prep):
    if not prep.mode.supervised:
        raise ConfigError("classify needs a supervised clamp_mode")
    prep.train_silently()
    prep.maybe_save()
    xte, yte = prep.data[2], prep.data[3]
    correct = 0
    chunk = 100
    for k, start in enumerate(range(0, xte.shape[0], chunk)):
        pred = classify(xte[start:start + chunk], prep.params, prep.spec, prep.mode, prep.flags)
        correct += int(np.sum(pred == yte[start:start + chunk]))
        seen = min(start + chunk, xte.shape[0])
        F, norms = evaluate_free_energy(LabeledBatch(xte[start:start + chunk], prep.yte_hot[start:start + chunk]),
                                        prep.params, prep.spec, prep.mode, prep.tcfg, prep.flags)
        yield MetricsRecord(k, F, norms, correct / seen, detail={"items": seen})


def suite_generate(cfg, rng, prep):
    if not prep.mode.supervised:
        raise ConfigError("generate needs a supervised clamp_mode")
    prep.train_silently()
    prep.maybe_save()
    xtr, ytr = prep.data[0], prep.data[1]
    n_classes = prep.mode.label_dim
    for c in range(n_classes):
        label = one_hot([c], n_classes)[0]
        img = generate(label, prep.params, prep.spec, prep.mode, prep.flags)
        members = xtr[ytr == c]
        residual = float(np.mean((img - members.mean(axis=0)) ** 2)) if members.size else None
        yield MetricsRecord(c, None, [float(np.sqrt(np.mean(img ** 2)))], residual, detail={"label": c})


def suite_kalman(cfg, rng, prep=None):
    km = cfg["kalman"]
    steps = km["steps"]
    worst = 0.0
    for s in range(km["systems"]):
        model = kalman.random_system(rng, km["n"], km["m"], km["p"])
        controls = rng.normal(size=(steps, model.m))
        _, obs = simulate_ssm(model, steps, rng, controls=controls)
        pc = kf = kalman.BeliefState(np.zeros(model.n), np.eye(model.n))
        S2inv = np.linalg.inv(model.Sigma2)
        for t in range(steps):
            pred = kalman.kf_project(kf, controls[t], model)
            kf = kalman.kf_correct(pred, obs[t], model)
            Pp = np.linalg.inv(pred.cov)
            mu = kalman.pc_linear_solve(pc.mean, controls[t], obs[t], model, prior_precision=Pp)
            drive = model.A @ pc.mean + model.B @ controls[t]
            pc = kalman.BeliefState(mu, kf.cov)
            e_o, e_x = obs[t] - model.C @ mu, mu - drive
            F = float(e_o @ S2inv @ e_o + e_x @ Pp @ e_x)
            gap = float(np.max(np.abs(mu - kf.mean)))
            worst = max(worst, gap)
            yield MetricsRecord(s * steps + t, F, [float(np.linalg.norm(e_o)), float(np.linalg.norm(e_x))],
                                gap, detail={"system": s, "max_gap": worst})


def _build_graph(cfg, rng):
    bp = cfg["backprop"]
    if bp["graph"] == "mlp":
        return gpc.mlp_graph(bp["dims"], bp["activation"], rng)
    if bp["graph"] == "diamond":
        return gpc.diamond_graph(bp["dims"][0], bp["activation"], rng)
    if bp["graph"] == "chain":
        return gpc.scaled_chain(rng.uniform(0.5, 1.5, size=len(bp["dims"])))
    try:
        return gpc.load_graph(bp["path"], rng)
    except OSError as exc:
        raise ConfigError(f"cannot read graph {bp['path']}: {exc.strerror}") from None


def suite_backprop(cfg, rng, prep=None):
    bp = cfg["backprop"]
    g = _build_graph(cfg, rng)
    inputs = {name: rng.normal(size=g.vertices[name].dim) for name in g.inputs}
    fwd = gpc.forward_pass(g, inputs)
    grads, pgrads = gpc.reverse_oracle(g, fwd)
    aug = gpc.AugmentedGraph(g, fwd)
    free = aug.free_vertices()
    records = []

    def watch(n, a):
        gap = max((float(np.max(np.abs(a.eps[k] - grads[k]))) for k in free), default=0.0)
        energy = 0.5 * sum(float(a.eps[k] @ a.eps[k]) for k in g.order)
        norms = [float(np.linalg.norm(a.eps[k])) for k in g.order]
        records.append(MetricsRecord(n, energy, norms, gap))

    gpc.pc_relax(aug, eta=bp["eta"], schedule=bp["schedule"], callback=watch)
    wupd = gpc.pc_weight_update(aug)
    wgap = max((float(np.max(np.abs(wupd[v][k] - pgrads[v][k]))) for v in wupd for k in wupd[v]), default=0.0)
    for r in records[:-1]:
        yield r
    last = records[-1]
    last.detail = {"weight_gap": wgap, "vertex_gap": last.task_metric, "iterations": aug.iterations}
    last.task_metric = max(last.task_metric, wgap)
    yield last


def suite_pid(cfg, rng, prep=None):
    pc = cfg["pid"]
    n, dt, sp = pc["steps"], pc["dt"], pc["setpoint"]
    s0, s1, s2 = pc["precisions"]
    dist = dynamics.step_disturbance(n, dt, [tuple(d) for d in pc["disturbance"]])
    if pc["noise"] > 0:
        dist = dist + dynamics.colored_noise(n, 20.0, rng, pc["noise"])
    ctrl = dynamics.PCPIDController(sp, (s0, s1, s2), dt)
    pid = dynamics.PIDController(k_p=s1, k_i=s0, k_d=s2, dt=dt)
    o = 0.0
    for t in range(n):
        e0, mean, vel, acc = ctrl.generalized_errors(o)
        a = ctrl.step(o)
        u = -pid.step(o - sp)
        F = 0.5 * (s0 * e0 ** 2 + s1 * vel ** 2 + s2 * acc ** 2)
        yield MetricsRecord(t, F, [abs(e0), abs(vel), abs(acc)], abs(o - sp),
                            detail={"action": a, "control_gap": abs(a - u)})
        o = o + dt * (a + dist[t])
        if not math.isfinite(o):
            raise DivergenceError(f"plant state diverged at step {t}", iteration=t)


def suite_precision(cfg, rng, prep=None):
    ps = cfg["precision_study"]
    step = 0
    for eps in ps["eps"]:
        S, iters = integrate_fixed_point(float(eps), 1.0, ps["eta"])
        S = float(S)
        yield MetricsRecord(step, None, [abs(float(eps))], abs(S - abs(float(eps)) ** (2.0 / 3.0)),
                            detail={"eps": float(eps), "sigma": S, "iterations": iters})
        step += 1
    N = ps["samples"]
    samples = rng.standard_normal(N)
    S = np.array(1.0)
    for _ in range(100_000):
        S_new = precision_step(S, samples[:, None], ps["eta"])
        if abs(float(S_new) - float(S)) < 1e-14:
            S = S_new
            break
        S = S_new
    resid = empirical_fixed_point_check(samples, S)
    yield MetricsRecord(step, None, [float(np.sqrt(np.mean(samples ** 2)))], resid,
                        detail={"sigma": float(S), "bound": 3.0 / math.sqrt(N),
                                "sigma_error": abs(float(S) - 1.0)})


SUITES = {
    "train": suite_train,
    "classify": suite_classify,
    "generate": suite_generate,
    "kalman-compare": suite_kalman,
    "backprop-compare": suite_backprop,
    "pid-compare": suite_pid,
    "precision-study": suite_precision,
}

_LEARNING = {"train", "classify", "generate"}


def run_experiment(cfg: ExperimentConfig, out=None, log=None) -> int:
    """Run one suite and write its metrics; returns the exit status."""
    out_path = Path(out if out is not None else cfg["out"])
    rng = np.random.default_rng(cfg.seed)
    wall = cfg["metrics"]["wall_clock"]
    try:
        prep = _Learning(cfg, rng) if cfg.kind in _LEARNING else None
        suite = SUITES[cfg.kind](cfg, rng, prep)
        first = next(suite, None)
    except (ConfigError, PredCodeError, OSError) as exc:
        if isinstance(exc, (DivergenceError, NumericalError)):
            _report(log, f"diverged: {exc}")
            return EXIT_DIVERGED
        _report(log, f"invalid configuration: {exc}")
        return EXIT_INVALID
    out_path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status = EXIT_OK
    with open(out_path, "w") as fh:
        try:
            rec = first
            while rec is not None:
                if wall:
                    rec.wall_ms = int((time.perf_counter() - t0) * 1000)
                fh.write(rec.to_json() + "\n")
                rec = next(suite, None)
        except (DivergenceError, NumericalError) as exc:
            _report(log, f"diverged: {exc}")
            status = EXIT_DIVERGED
        except (ConfigError, PredCodeError) as exc:
            _report(log, f"invalid configuration: {exc}")
            status = EXIT_INVALID
    return status


def _report(log, msg):
    if log is not None:
        log(msg)
