"""Relaxed predictive coding: learnable feedback weights, dropped derivatives
and learnable error connectivity.

With flags set, each layer's error becomes ``eps_l = mu_l - zeta_l f(theta mu)``
and errors are sent upwards through ``psi_l`` (shape ``(d_l, d_{l-1})``)
instead of ``theta_l^T``. Composition order inside one training step:
errors (zeta) -> inference (psi / derivative flags) -> all weight updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .network import (NetworkParams, NetworkSpec, NetworkState, apply_precision, compute_errors,
                      predict)


@dataclass
class RelaxationFlags:
    use_psi: bool = False
    drop_derivative: bool = False
    use_zeta: bool = False
    psi: list | None = None
    zeta: list | None = None

    @classmethod
    def init(cls, spec: NetworkSpec, use_psi=False, drop_derivative=False, use_zeta=False,
             rng=None, psi_range: float = 0.05, zeta_init: str = "identity") -> "RelaxationFlags":
        rng = np.random.default_rng(rng)
        dims = spec.layer_dims
        psi = zeta = None
        if use_psi:
            psi = [None] + [rng.uniform(-psi_range, psi_range, size=(dims[l], dims[l - 1]))
                            for l in range(1, len(dims))]
        if use_zeta:
            if zeta_init == "identity":
                zeta = [np.eye(d) for d in dims[:-1]]
            else:
                zeta = [rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)) for d in dims[:-1]]
        return cls(use_psi, drop_derivative, use_zeta, psi, zeta)

    def validate(self, spec: NetworkSpec) -> None:
        dims = spec.layer_dims
        if self.use_psi != (self.psi is not None) or self.use_zeta != (self.zeta is not None):
            raise StructuralError("psi/zeta must be allocated exactly when their flags are set")
        if self.use_psi:
            for l in range(1, len(dims)):
                if self.psi[l].shape != (dims[l], dims[l - 1]):
                    raise StructuralError(f"psi[{l}] must have shape {(dims[l], dims[l - 1])}")
        if self.use_zeta:
            for l, d in enumerate(dims[:-1]):
                if self.zeta[l].shape != (d, d):
                    raise StructuralError(f"zeta[{l}] must be {d} x {d}")

    def copy(self) -> "RelaxationFlags":
        cp = lambda xs: None if xs is None else [None if x is None else x.copy() for x in xs]
        return RelaxationFlags(self.use_psi, self.drop_derivative, self.use_zeta, cp(self.psi), cp(self.zeta))


def zeta_error(mu_l, prediction, zeta_l):
    """mu_l - zeta_l @ prediction (row-wise for batches)."""
    return np.asarray(mu_l, dtype=float) - np.asarray(prediction, dtype=float) @ np.asarray(zeta_l).T


def relaxed_errors(state: NetworkState, params: NetworkParams, spec: NetworkSpec,
                   flags: RelaxationFlags) -> list:
    if not flags.use_zeta:
        return compute_errors(state, params, spec)
    L = spec.n_layers
    eps = [zeta_error(state.mu[l], predict(params, spec, state.mu[l + 1], l), flags.zeta[l]) for l in range(L)]
    eps.append(state.mu[L] - spec.prior_mean)
    state.eps = eps
    return eps


def _upward_error(state, params, spec, flags, l):
    """Error from layer l-1 as seen by layer l, before the feedback map."""
    g = apply_precision(params.precision[l - 1], state.eps[l - 1])
    if flags.use_zeta:
        g = g @ flags.zeta[l - 1]
    if not flags.drop_derivative:
        g = spec.activation(l - 1).df(state.mu[l] @ params.theta[l].T) * g
    return g


def relaxed_infer_step(state: NetworkState, params: NetworkParams, flags: RelaxationFlags,
                       spec: NetworkSpec, step_size: float | None = None) -> NetworkState:
    """One Euler step of the value dynamics under the selected relaxations (in place)."""
    eta = spec.step_size if step_size is None else step_size
    relaxed_errors(state, params, spec, flags)
    L = spec.n_layers
    updates = []
    for l in range(L + 1):
        d = -apply_precision(params.precision[l], state.eps[l])
        if l > 0:
            g = _upward_error(state, params, spec, flags, l)
            d = d + (g @ flags.psi[l].T if flags.use_psi else g @ params.theta[l])
        updates.append(d)
    for l, d in enumerate(updates):
        if not state.clamped[l]:
            state.mu[l] = state.mu[l] + eta * d
    relaxed_errors(state, params, spec, flags)
    return state


def relaxed_weight_gradients(state, params, spec, flags) -> list:
    """Hebbian theta updates under the flags, summed over rows."""
    out = [None]
    for l in range(1, spec.n_layers + 1):
        g = _upward_error(state, params, spec, flags, l)
        out.append(np.outer(g, state.mu[l]) if g.ndim == 1 else g.T @ state.mu[l])
    return out


def psi_step(psi_l, mu_above, eps_below, eta: float, gate=None, precision=None):
    """Hebbian feedback-weight update ``psi += eta * mu_above (gate * P eps_below)^T``.

    ``gate`` is the activation derivative at the prediction (omit it when the
    derivative is dropped); batched inputs are averaged over rows.
    """
    g = np.asarray(eps_below, dtype=float)
    if precision is not None:
        g = apply_precision(precision, g)
    if gate is not None:
        g = gate * g
    mu_above = np.asarray(mu_above, dtype=float)
    if g.ndim == 1:
        delta = np.outer(mu_above, g)
    else:
        delta = mu_above.T @ g / g.shape[0]
    return psi_l + eta * delta


def zeta_step(zeta_l, mu_l, eps_l, eta: float, rule: str = "hebbian", prediction=None, precision=None):
    """Update of the error-connectivity matrix.

    ``hebbian``: zeta += eta * mu_l eps_l^T.
    ``gradient``: zeta += eta * (P eps_l) prediction^T, i.e. -dF/dzeta / 2.
    Batched inputs are averaged over rows.
    """
    mu_l = np.asarray(mu_l, dtype=float)
    eps_l = np.asarray(eps_l, dtype=float)
    if rule == "hebbian":
        a, b = mu_l, eps_l
    elif rule == "gradient":
        if prediction is None:
            raise StructuralError("the gradient rule needs the prediction")
        a = eps_l if precision is None else apply_precision(precision, eps_l)
        b = np.asarray(prediction, dtype=float)
    else:
        raise StructuralError(f"unknown zeta rule {rule!r}")
    delta = np.outer(a, b) if a.ndim == 1 else a.T @ b / a.shape[0]
    return zeta_l + eta * delta


def alignment_angle(psi_l, theta_l) -> float:
    """Angle in degrees between psi_l and theta_l^T, flattened."""
    a = np.ravel(psi_l)
    b = np.ravel(np.asarray(theta_l).T)
    c = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
