"""Clamping regimes, evaluation and minibatch EM training.

Three regimes are supported:

unsupervised
    data clamped at layer 0, every other layer free.
supervised_forward
    data at layer 0, label at layer L. Classification needs relaxation,
    generation is a single downward sweep.
supervised_backward
    label at layer 0, data at layer L. Classification is a single downward
    sweep, generation needs relaxation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError, DivergenceError, StructuralError
from .network import (NetworkParams, NetworkSpec, NetworkState, compute_errors, free_energy,
                      initialize_state, predict, run_inference, weight_step)
from .precision import PrecisionMode, precision_step
from .relaxed import (RelaxationFlags, psi_step, relaxed_errors, relaxed_infer_step,
                      relaxed_weight_gradients, zeta_step)

DEFAULT_WEIGHT_DECAY = 1e-4


class ClampTag(str, enum.Enum):
    UNSUPERVISED = "unsupervised"
    SUPERVISED_FORWARD = "supervised_forward"
    SUPERVISED_BACKWARD = "supervised_backward"


@dataclass(frozen=True)
class ClampMode:
    tag: ClampTag
    label_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "tag", ClampTag(self.tag))
        if self.supervised and (self.label_dim is None or self.label_dim < 1):
            raise ArgumentError("supervised modes need a positive label_dim")

    @property
    def supervised(self) -> bool:
        return self.tag is not ClampTag.UNSUPERVISED

    def data_layer(self, spec: NetworkSpec) -> int:
        return spec.n_layers if self.tag is ClampTag.SUPERVISED_BACKWARD else 0

    def label_layer(self, spec: NetworkSpec) -> int | None:
        if self.tag is ClampTag.SUPERVISED_FORWARD:
            return spec.n_layers
        if self.tag is ClampTag.SUPERVISED_BACKWARD:
            return 0
        return None

    def validate(self, spec: NetworkSpec) -> None:
        lab = self.label_layer(spec)
        if lab is not None and spec.layer_dims[lab] != self.label_dim:
            raise StructuralError(
                f"{self.tag.value} needs label_dim == d[{lab}] = {spec.layer_dims[lab]}, got {self.label_dim}")


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=float)
            if self.labels.shape[:-1] != self.inputs.shape[:-1]:
                raise StructuralError("inputs and labels disagree on the number of items")
            if not np.allclose(self.labels.sum(axis=-1), 1.0):
                raise ArgumentError("label rows must sum to 1")

    def __len__(self) -> int:
        return 1 if self.inputs.ndim == 1 else self.inputs.shape[0]


def _as_batch(item) -> LabeledBatch:
    if isinstance(item, LabeledBatch):
        return item
    if isinstance(item, tuple):
        return LabeledBatch(*item)
    return LabeledBatch(item)


def apply_clamps(mode: ClampMode, item, state: NetworkState, spec: NetworkSpec | None = None) -> NetworkState:
    """Clamp data (and label) into ``state`` according to ``mode`` (in place)."""
    item = _as_batch(item)
    L = len(state.mu) - 1
    if mode.supervised and item.labels is None:
        raise ArgumentError(f"{mode.tag.value} needs a label")
    state.clamped = [False] * (L + 1)
    data_at = L if mode.tag is ClampTag.SUPERVISED_BACKWARD else 0
    if item.inputs.shape[-1] != state.mu[data_at].shape[-1]:
        raise StructuralError(f"data has dim {item.inputs.shape[-1]}, layer {data_at} has {state.mu[data_at].shape[-1]}")
    state.clamp(data_at, item.inputs)
    if mode.supervised:
        lab_at = 0 if data_at == L else L
        if item.labels.shape[-1] != state.mu[lab_at].shape[-1]:
            raise StructuralError(f"label has dim {item.labels.shape[-1]}, layer {lab_at} has {state.mu[lab_at].shape[-1]}")
        state.clamp(lab_at, item.labels)
    return state


def downward_sweep(params: NetworkParams, spec: NetworkSpec, top, stop: int = 0) -> list:
    """Predictions of layers L-1 .. stop from a top-layer value; L - stop products."""
    values = {spec.n_layers: np.asarray(top, dtype=float)}
    for l in range(spec.n_layers - 1, stop - 1, -1):
        values[l] = predict(params, spec, values[l + 1], l)
    return [values[l] for l in range(stop, spec.n_layers + 1)]


def _check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite activations while computing {what}")


def relax(state: NetworkState, params: NetworkParams, spec: NetworkSpec,
          flags: RelaxationFlags | None = None, max_iters: int | None = None,
          step_size: float | None = None) -> tuple[NetworkState, int]:
    """Run the value dynamics, honouring relaxation flags when given."""
    if flags is None or not (flags.use_psi or flags.use_zeta or flags.drop_derivative):
        return run_inference(state, params, spec, max_iters=max_iters, step_size=step_size)
    max_iters = spec.max_iters if max_iters is None else max_iters
    relaxed_errors(state, params, spec, flags)
    n = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(1, max_iters + 1):
            before = [m.copy() for m in state.mu]
            relaxed_infer_step(state, params, flags, spec, step_size)
            for l, m in enumerate(state.mu):
                if not np.all(np.isfinite(m)):
                    raise DivergenceError(f"relaxation diverged in layer {l}", layer=l, iteration=n)
            if max(float(np.max(np.abs(a - b))) for a, b in zip(state.mu, before)) < spec.tol:
                break
    return state, n


def classify(item, params: NetworkParams, spec: NetworkSpec, mode: ClampMode,
             flags: RelaxationFlags | None = None, max_iters: int | None = None):
    """Predicted label index (an int, or an int array for a batch).

    Ties go to the lowest index.
    """
    x = np.asarray(item.inputs if isinstance(item, LabeledBatch) else item, dtype=float)
    if mode.tag is ClampTag.SUPERVISED_BACKWARD:
        with np.errstate(over="ignore", invalid="ignore"):
            out = downward_sweep(params, spec, x)[0]
    elif mode.tag is ClampTag.SUPERVISED_FORWARD:
        state = NetworkState.zeros(spec, batch=None if x.ndim == 1 else x.shape[0])
        state.clamp(0, x)
        initialize_state(state, params, spec, "sweep")
        relax(state, params, spec, flags, max_iters)
        out = state.mu[spec.n_layers]
    else:
        raise ArgumentError("classification needs a supervised mode")
    _check_finite(out, "the label layer")
    return np.argmax(out, axis=-1) if out.ndim == 2 else int(np.argmax(out))


def generate(label, params: NetworkParams, spec: NetworkSpec, mode: ClampMode,
             flags: RelaxationFlags | None = None, max_iters: int | None = None):
    """Synthesize an observation from a label (one-hot or embedding)."""
    y = np.asarray(label, dtype=float)
    if mode.tag is ClampTag.SUPERVISED_FORWARD:
        with np.errstate(over="ignore", invalid="ignore"):
            out = downward_sweep(params, spec, y)[0]
    elif mode.tag is ClampTag.SUPERVISED_BACKWARD:
        state = NetworkState.zeros(spec, batch=None if y.ndim == 1 else y.shape[0])
        state.clamp(0, y)
        initialize_state(state, params, spec, "sweep")
        relax(state, params, spec, flags, max_iters)
        out = state.mu[spec.n_layers]
    else:
        raise ArgumentError("generation needs a supervised mode")
    _check_finite(out, "the generated observation")
    return out


def accuracy(inputs, labels, params, spec, mode, flags=None, max_iters=None) -> float:
    pred = classify(np.asarray(inputs, dtype=float), params, spec, mode, flags, max_iters)
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.05
    n_iters: int = 20
    step_size: float | None = None
    weight_decay: float = 0.0
    precision_mode: PrecisionMode = PrecisionMode.FIXED
    precision_lr: float = 0.01
    precision_rule: str = "error"
    psi_lr: float | None = None
    zeta_lr: float = 0.01
    zeta_rule: str = "hebbian"
    anneal: float = 0.0

    def __post_init__(self):
        self.precision_mode = PrecisionMode(self.precision_mode)
        if self.batch_size < 1 or self.n_iters < 1:
            raise ArgumentError("batch_size and n_iters must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ArgumentError("lr must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.anneal < 1.0:
            raise ArgumentError("anneal must lie in [0, 1)")

    def lr_at(self, epoch: int, n_epochs: int) -> float:
        """Linearly annealed rate: lr at epoch 0 down to lr * (1 - anneal) at the end."""
        return self.lr * (1.0 - self.anneal * epoch / max(n_epochs, 1))


def _update_precisions(state, params, cfg: TrainConfig):
    full = cfg.precision_mode is PrecisionMode.FULL_LEARNED
    for l, (e, P) in enumerate(zip(state.eps, params.precision)):
        if state.clamped[l] and l == len(state.eps) - 1:
            continue
        if full:
            S = np.linalg.inv(np.diag(P) if P.ndim == 1 else P)
            params.precision[l] = np.linalg.inv(precision_step(S, e, cfg.precision_lr, cfg.precision_rule))
        else:
            S = 1.0 / (P if P.ndim == 1 else np.diag(P))
            S = precision_step(S, e, cfg.precision_lr, cfg.precision_rule)
            params.precision[l] = 1.0 / S if P.ndim == 1 else np.diag(1.0 / S)


def train_step(batch: LabeledBatch, params: NetworkParams, spec: NetworkSpec, mode: ClampMode,
               cfg: TrainConfig, flags: RelaxationFlags | None = None) -> float:
    """E-step (relaxation) then M-step on one minibatch; returns mean F before the M-step."""
    state = NetworkState.zeros(spec, batch=len(batch))
    apply_clamps(mode, batch, state)
    initialize_state(state, params, spec, "sweep")
    relax(state, params, spec, flags, cfg.n_iters, cfg.step_size)
    F = float(np.mean(free_energy(state, params, spec)))
    n = len(batch)
    if flags is None or not (flags.use_psi or flags.use_zeta or flags.drop_derivative):
        weight_step(state, params, spec, lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        grads = relaxed_weight_gradients(state, params, spec, flags)
        psi_lr = cfg.lr if cfg.psi_lr is None else cfg.psi_lr
        for l in range(1, spec.n_layers + 1):
            if flags.use_psi:
                gate = None if flags.drop_derivative else spec.activation(l - 1).df(state.mu[l] @ params.theta[l].T)
                eps_below = state.eps[l - 1] if not flags.use_zeta else state.eps[l - 1] @ flags.zeta[l - 1]
                flags.psi[l] = psi_step(flags.psi[l], state.mu[l], eps_below, psi_lr, gate,
                                        params.precision[l - 1])
                if cfg.weight_decay:
                    flags.psi[l] = flags.psi[l] - psi_lr * cfg.weight_decay * flags.psi[l]
            delta = grads[l] / n - cfg.weight_decay * params.theta[l]
            params.theta[l] = params.theta[l] + cfg.lr * delta
        if flags.use_zeta:
            for l in range(spec.n_layers):
                pred = predict(params, spec, state.mu[l + 1], l)
                flags.zeta[l] = zeta_step(flags.zeta[l], state.mu[l], state.eps[l], cfg.zeta_lr,
                                          cfg.zeta_rule, pred, params.precision[l])
    if cfg.precision_mode is not PrecisionMode.FIXED:
        _update_precisions(state, params, cfg)
    for l in range(1, spec.n_layers + 1):
        if not np.all(np.isfinite(params.theta[l])):
            raise DivergenceError(f"weights of layer {l} became non-finite", layer=l)
    return F


def train_epoch(inputs, labels, params: NetworkParams, spec: NetworkSpec, mode: ClampMode,
                cfg: TrainConfig, rng=None, flags: RelaxationFlags | None = None) -> float:
    """One shuffled pass of minibatch EM at ``cfg.lr``; returns the mean pre-update F."""
    X = np.asarray(inputs, dtype=float)
    Y = None if labels is None else np.asarray(labels, dtype=float)
    if X.shape[0] == 0:
        raise ArgumentError("training needs at least one item")
    mode.validate(spec)
    rng = np.random.default_rng(rng)
    order = rng.permutation(X.shape[0])
    total = 0.0
    for start in range(0, X.shape[0], cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        batch = LabeledBatch(X[idx], None if Y is None else Y[idx])
        total += train_step(batch, params, spec, mode, cfg, flags) * len(idx)
    return total / X.shape[0]


def fit(inputs, labels, params, spec, mode, cfg: TrainConfig, epochs: int, rng=None, flags=None,
        callback=None) -> list:
    """Run ``epochs`` passes with the annealed rate; ``callback(epoch, F)`` after each."""
    rng = np.random.default_rng(rng)
    history = []
    for ep in range(epochs):
        step_cfg = replace(cfg, lr=cfg.lr_at(ep, epochs))
        F = train_epoch(inputs, labels, params, spec, mode, step_cfg, rng, flags)
        history.append(F)
        if callback is not None:
            callback(ep, F)
    return history


def layer_error_norms(state: NetworkState) -> list:
    """Root-mean-square error per layer (averaged over batch rows)."""
    return [float(np.sqrt(np.mean(np.square(e)))) for e in state.eps]


def evaluate_free_energy(batch: LabeledBatch, params, spec, mode, cfg: TrainConfig, flags=None):
    """Relax a batch without learning; returns (mean F, per-layer error norms)."""
    state = NetworkState.zeros(spec, batch=len(batch))
    apply_clamps(mode, batch, state)
    initialize_state(state, params, spec, "sweep")
    relax(state, params, spec, flags, cfg.n_iters, cfg.step_size)
    compute_errors(state, params, spec)
    return float(np.mean(free_energy(state, params, spec))), layer_error_norms(state)
