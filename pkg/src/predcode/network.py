"""Hierarchical Gaussian predictive coding network.

Indexing: layer 0 is the observation, layer L the top. ``theta[l]`` (for
l = 1..L) has shape ``(d[l-1], d[l])`` and maps layer-l activity to the
prediction of layer l-1:

    eps[l] = mu[l] - f_{l}(theta[l+1] @ mu[l+1])     (l < L)
    eps[L] = mu[L] - prior_mean

``theta[0]`` is always ``None``. Every per-layer quantity can be a single
vector ``(d,)`` or a batch ``(B, d)``; batches are rows.

The free energy follows the convention with no 1/2 factors,

    F = sum_l  eps_l^T P_l eps_l + ln det(2 pi Sigma_l),

so the mu- and theta-updates below are exactly ``-dF/d(.) / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .activations import Activation, get_activation
from .errors import ArgumentError, DivergenceError, DomainError, StructuralError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class NetworkSpec:
    layer_dims: Sequence[int]
    activations: Sequence[str] | str = "identity"
    prior_mean: np.ndarray | None = None
    step_size: float = 0.1
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise StructuralError("a network needs at least two layers (L >= 1)")
        if any(d < 1 for d in self.layer_dims):
            raise StructuralError(f"layer dimensions must be >= 1, got {self.layer_dims}")
        if self.step_size <= 0:
            raise ArgumentError("step_size must be > 0")
        if self.tol <= 0:
            raise ArgumentError("tol must be > 0")
        if self.max_iters < 1:
            raise ArgumentError("max_iters must be >= 1")
        if isinstance(self.activations, (str, Activation)):
            self.activations = [self.activations] * self.n_layers
        if len(self.activations) != self.n_layers:
            raise StructuralError(
                f"need one activation per predicted layer ({self.n_layers}), got {len(self.activations)}"
            )
        self.activations = [get_activation(a) for a in self.activations]
        if self.prior_mean is None:
            self.prior_mean = np.zeros(self.layer_dims[-1])
        self.prior_mean = np.asarray(self.prior_mean, dtype=float).reshape(-1)
        if self.prior_mean.shape != (self.layer_dims[-1],):
            raise StructuralError("prior_mean must have the top layer's dimension")

    @property
    def n_layers(self) -> int:
        """L, the index of the top layer."""
        return len(self.layer_dims) - 1

    def activation(self, l: int) -> Activation:
        """Activation applied to the prediction of layer ``l`` (l < L)."""
        return self.activations[l]

    @property
    def is_linear(self) -> bool:
        return all(a.is_linear for a in self.activations)


@dataclass
class NetworkState:
    mu: list
    eps: list = field(default_factory=list)
    clamped: list = field(default_factory=list)

    def __post_init__(self):
        self.mu = [np.array(m, dtype=float) for m in self.mu]
        if not self.clamped:
            self.clamped = [False] * len(self.mu)
        if not self.eps:
            self.eps = [np.zeros_like(m) for m in self.mu]

    @classmethod
    def zeros(cls, spec: NetworkSpec, batch: int | None = None) -> "NetworkState":
        shape = (lambda d: (d,)) if batch is None else (lambda d: (batch, d))
        return cls(mu=[np.zeros(shape(d)) for d in spec.layer_dims])

    def copy(self) -> "NetworkState":
        return NetworkState(
            mu=[m.copy() for m in self.mu],
            eps=[e.copy() for e in self.eps],
            clamped=list(self.clamped),
        )

    def clamp(self, layer: int, value) -> None:
        self.mu[layer] = np.array(value, dtype=float)
        self.clamped[layer] = True

    @property
    def batched(self) -> bool:
        return self.mu[0].ndim == 2


@dataclass
class NetworkParams:
    theta: list
    precision: list

    @classmethod
    def init(cls, spec: NetworkSpec, rng=None, scale: float | None = None,
             diagonal: bool | str = False) -> "NetworkParams":
        """Random weights (Xavier-style unless ``scale`` is given) and identity precisions.

        ``diagonal="auto"`` stores the precision of layers wider than 64 as a
        diagonal vector and the rest as full matrices.
        """
        rng = np.random.default_rng(rng)
        dims = spec.layer_dims
        theta = [None]
        for l in range(1, len(dims)):
            s = scale if scale is not None else np.sqrt(1.0 / dims[l])
            theta.append(rng.normal(0.0, s, size=(dims[l - 1], dims[l])))
        if diagonal == "auto":
            precision = [np.ones(d) if d > 64 else np.eye(d) for d in dims]
        else:
            precision = [np.ones(d) if diagonal else np.eye(d) for d in dims]
        return cls(theta=theta, precision=precision)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            theta=[None if t is None else t.copy() for t in self.theta],
            precision=[p.copy() for p in self.precision],
        )


# ---------------------------------------------------------------------------
# precision helpers; a precision is a full (d, d) matrix or a diagonal (d,)


def apply_precision(P: np.ndarray, e: np.ndarray) -> np.ndarray:
    """P @ e for a vector, or row-wise for a batch."""
    if P.ndim == 1:
        return e * P
    return e @ P.T


def quad_form(P: np.ndarray, e: np.ndarray):
    return np.sum(e * apply_precision(P, e), axis=-1)


def check_precision(P: np.ndarray, layer: int | None = None) -> None:
    where = "" if layer is None else f" at layer {layer}"
    if P.ndim == 1:
        if not np.all(P > 0):
            raise DomainError(f"diagonal precision{where} must be strictly positive")
        return
    if not np.allclose(P, P.T, atol=1e-10, rtol=0):
        raise DomainError(f"precision{where} is not symmetric")
    if np.linalg.eigvalsh(P)[0] <= 0:
        raise DomainError(f"precision{where} is not positive definite")


def log_det_2pi_cov(P: np.ndarray) -> float:
    """ln det(2 pi Sigma) given the precision P = Sigma^-1."""
    d = P.shape[0]
    if P.ndim == 1:
        return d * LOG_2PI - float(np.sum(np.log(P)))
    sign, logdet = np.linalg.slogdet(P)
    if sign <= 0:
        raise DomainError("precision is not positive definite")
    return d * LOG_2PI - float(logdet)


# ---------------------------------------------------------------------------


def _check_shapes(state: NetworkState, params: NetworkParams, spec: NetworkSpec) -> None:
    dims = spec.layer_dims
    if len(state.mu) != len(dims):
        raise StructuralError(f"state has {len(state.mu)} layers, spec has {len(dims)}")
    for l, (m, d) in enumerate(zip(state.mu, dims)):
        if m.shape[-1] != d or m.ndim not in (1, 2):
            raise StructuralError(f"mu[{l}] has shape {m.shape}, expected (..., {d})")
    for l in range(1, len(dims)):
        if params.theta[l].shape != (dims[l - 1], dims[l]):
            raise StructuralError(
                f"theta[{l}] has shape {params.theta[l].shape}, expected {(dims[l - 1], dims[l])}"
            )
    for l, (P, d) in enumerate(zip(params.precision, dims)):
        if P.shape not in ((d,), (d, d)):
            raise StructuralError(f"precision[{l}] has shape {P.shape}, expected ({d},) or ({d}, {d})")


def predict(params: NetworkParams, spec: NetworkSpec, mu_above: np.ndarray, l: int) -> np.ndarray:
    """Top-down prediction of layer ``l`` from ``mu[l+1]``."""
    return spec.activation(l)(mu_above @ params.theta[l + 1].T)


def compute_errors(state: NetworkState, params: NetworkParams, spec: NetworkSpec) -> list:
    _check_shapes(state, params, spec)
    L = spec.n_layers
    eps = [state.mu[l] - predict(params, spec, state.mu[l + 1], l) for l in range(L)]
    eps.append(state.mu[L] - spec.prior_mean)
    state.eps = eps
    return eps


def free_energy(state: NetworkState, params: NetworkParams, spec: NetworkSpec):
    """Free energy of the current state; an array of per-row values for a batch.

    Uses the cached ``state.eps``; call :func:`compute_errors` first.
    """
    F = 0.0
    for l, (e, P) in enumerate(zip(state.eps, params.precision)):
        check_precision(P, l)
        F = F + quad_form(P, e) + log_det_2pi_cov(P)
    return F


def mu_gradient(state: NetworkState, params: NetworkParams, spec: NetworkSpec) -> list:
    """Descent direction for every layer: -dF/dmu_l / 2 (clamped layers included)."""
    L = spec.n_layers
    grads = []
    for l in range(L + 1):
        g = -apply_precision(params.precision[l], state.eps[l])
        if l > 0:
            a = state.mu[l] @ params.theta[l].T
            below = spec.activation(l - 1).df(a) * apply_precision(params.precision[l - 1], state.eps[l - 1])
            g = g + below @ params.theta[l]
        grads.append(g)
    return grads


def infer_step(state: NetworkState, params: NetworkParams, spec: NetworkSpec,
               step_size: float | None = None) -> NetworkState:
    """One Euler step of the value dynamics on unclamped layers (in place)."""
    eta = spec.step_size if step_size is None else step_size
    grads = mu_gradient(state, params, spec)
    for l, g in enumerate(grads):
        if not state.clamped[l]:
            state.mu[l] = state.mu[l] + eta * g
    compute_errors(state, params, spec)
    return state


def _nonfinite_layer(state: NetworkState):
    for l, (m, e) in enumerate(zip(state.mu, state.eps)):
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(e))):
            return l
    return None


def run_inference(state: NetworkState, params: NetworkParams, spec: NetworkSpec,
                  max_iters: int | None = None, tol: float | None = None,
                  step_size: float | None = None, trace: list | None = None):
    """Relax unclamped layers until the largest change is below ``tol``.

    Returns ``(state, n_iters)``. If ``trace`` is a list, the total free
    energy is appended to it before the first and after every step.
    """
    max_iters = spec.max_iters if max_iters is None else max_iters
    tol = spec.tol if tol is None else tol
    compute_errors(state, params, spec)
    if trace is not None:
        trace.append(float(np.sum(free_energy(state, params, spec))))
    n = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(1, max_iters + 1):
            before = [m.copy() for l, m in enumerate(state.mu) if not state.clamped[l]]
            infer_step(state, params, spec, step_size)
            bad = _nonfinite_layer(state)
            if bad is None:
                energies = [quad_form(P, e) for P, e in zip(params.precision, state.eps)]
                finite = [bool(np.all(np.isfinite(q))) for q in energies]
                if not all(finite):
                    bad = finite.index(False)
            if bad is not None:
                raise DivergenceError(
                    f"inference diverged at iteration {n}: non-finite values in layer {bad}",
                    layer=bad, iteration=n)
            if trace is not None:
                trace.append(float(np.sum(free_energy(state, params, spec))))
            after = [m for l, m in enumerate(state.mu) if not state.clamped[l]]
            change = max((float(np.max(np.abs(a - b))) for a, b in zip(after, before)), default=0.0)
            if change < tol:
                break
    return state, n


def weight_delta(eps_below: np.ndarray, mu: np.ndarray, theta: np.ndarray,
                 prec_below: np.ndarray, activation: Activation,
                 drop_derivative: bool = False) -> np.ndarray:
    """Hebbian update for one weight matrix, summed over batch rows.

    Depends only on the error below, the layer's own activity, its weights
    and the precision below: -dF/dtheta_l / 2.
    """
    g = apply_precision(prec_below, eps_below)
    if not drop_derivative:
        g = activation.df(mu @ theta.T) * g
    if g.ndim == 1:
        return np.outer(g, mu)
    return g.T @ mu


def weight_gradients(state: NetworkState, params: NetworkParams, spec: NetworkSpec,
                     drop_derivative: bool = False) -> list:
    grads = [None]
    for l in range(1, spec.n_layers + 1):
        grads.append(weight_delta(state.eps[l - 1], state.mu[l], params.theta[l],
                                  params.precision[l - 1], spec.activation(l - 1), drop_derivative))
    return grads


def weight_step(state: NetworkState, params: NetworkParams, spec: NetworkSpec,
                lr: float | None = None, weight_decay: float = 0.0) -> NetworkParams:
    """One descent step on theta (in place). Batched states are averaged over rows.

    ``weight_decay`` adds lambda * ||theta||^2 to F; its contribution to the
    full gradient is 2 * lambda * theta.
    """
    lr = spec.step_size if lr is None else lr
    n = state.mu[0].shape[0] if state.batched else 1
    grads = weight_gradients(state, params, spec)
    for l in range(1, spec.n_layers + 1):
        delta = grads[l] / n
        if weight_decay:
            delta = delta - weight_decay * params.theta[l]
        params.theta[l] = params.theta[l] + lr * delta
    return params


def initialize_state(state: NetworkState, params: NetworkParams, spec: NetworkSpec,
                     method: str = "sweep", rng=None) -> NetworkState:
    """Set starting values for unclamped layers.

    ``sweep``: if the top layer is clamped, a downward prediction sweep;
    otherwise an upward sweep through ``theta^T`` from the bottom.
    ``random``: standard normal draws scaled by 0.05.
    """
    L = spec.n_layers
    if method == "random":
        rng = np.random.default_rng(rng)
        for l in range(L + 1):
            if not state.clamped[l]:
                state.mu[l] = 0.05 * rng.standard_normal(state.mu[l].shape)
    elif method == "sweep":
        if state.clamped[L]:
            for l in range(L - 1, -1, -1):
                if not state.clamped[l]:
                    state.mu[l] = predict(params, spec, state.mu[l + 1], l)
        else:
            for l in range(1, L + 1):
                if not state.clamped[l]:
                    state.mu[l] = state.mu[l - 1] @ params.theta[l]
    else:
        raise ArgumentError(f"unknown initialization method {method!r}")
    compute_errors(state, params, spec)
    return state


def em_epoch(batch, params: NetworkParams, spec: NetworkSpec, lr: float | None = None,
             init: str = "sweep", rng=None, weight_decay: float = 0.0):
    """One EM pass over ``batch`` (a list of observation vectors).

    Every item is clamped at layer 0 and relaxed independently; the weight
    gradients are averaged and applied once. Returns ``(params, mean_F)``
    with F evaluated at the relaxed values under the updated weights.
    """
    obs = np.asarray(batch, dtype=float)
    if obs.size == 0:
        raise ArgumentError("em_epoch needs a non-empty batch")
    if obs.ndim == 1:
        obs = obs[None, :]
    if obs.shape[1] != spec.layer_dims[0]:
        raise StructuralError(f"observations have dim {obs.shape[1]}, expected {spec.layer_dims[0]}")
    state = NetworkState.zeros(spec, batch=obs.shape[0])
    state.clamp(0, obs)
    initialize_state(state, params, spec, init, rng)
    run_inference(state, params, spec)
    weight_step(state, params, spec, lr=lr, weight_decay=weight_decay)
    compute_errors(state, params, spec)
    return params, float(np.mean(free_energy(state, params, spec)))


def biased_competition_step(mu, mu_bar, o, theta1, theta2, alpha, beta, gamma):
    """alpha * mu + beta * theta1^T (o - theta1 mu) + gamma * theta2 mu_bar."""
    mu = np.asarray(mu, dtype=float)
    theta1 = np.atleast_2d(np.asarray(theta1, dtype=float))
    theta2 = np.atleast_2d(np.asarray(theta2, dtype=float))
    mu_v, o_v, mb_v = np.atleast_1d(mu), np.atleast_1d(o), np.atleast_1d(mu_bar)
    if theta1.shape != (o_v.shape[0], mu_v.shape[0]) or theta2.shape != (mu_v.shape[0], mb_v.shape[0]):
        raise StructuralError("biased competition shapes are inconsistent")
    eps_o = o_v - theta1 @ mu_v
    out = alpha * mu_v + beta * (theta1.T @ eps_o) + gamma * (theta2 @ mb_v)
    return out.reshape(mu.shape)
