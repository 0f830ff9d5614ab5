"""Learned precisions and their natural-gradient interpretation.

Two variance dynamics are provided:

``rule="error"`` (default)
    dSigma/dt = e~ e~^T - Sigma with e~ = Sigma^-1 e. Its scalar fixed point
    is Sigma^3 = e^2.
``rule="gradient"``
    dSigma/dt = Sigma^-1 e e^T Sigma^-1 - Sigma^-1, which is exactly
    -dF/dSigma for the layer term e^T Sigma^-1 e + ln det Sigma. Its fixed
    point is Sigma = e e^T.

Both share the data-driven term; they differ only in the decay term.
"""

from __future__ import annotations

import enum

import numpy as np

from .activations import get_activation
from .errors import ArgumentError, DomainError, UnsupportedConfigurationError

EIG_FLOOR = 1e-8


class PrecisionMode(str, enum.Enum):
    FIXED = "fixed"
    DIAGONAL_LEARNED = "diagonal_learned"
    FULL_LEARNED = "full_learned"


def project_pd(S: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrise and clip eigenvalues from below."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] >= floor:
        return S
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def _as_2d(S):
    S = np.asarray(S, dtype=float)
    return S.reshape(1, 1) if S.ndim == 0 else S


def precision_step(Sigma, eps, eta: float, rule: str = "error", floor: float = EIG_FLOOR):
    """One Euler step of the variance dynamics; returns the new covariance.

    ``eps`` may be a single error vector or a batch of rows, in which case the
    outer products are averaged. ``Sigma`` is a scalar, a full matrix, or a
    1-D vector holding a diagonal covariance.
    """
    Sigma_in = np.asarray(Sigma, dtype=float)
    diagonal = Sigma_in.ndim == 1
    if diagonal:
        if np.any(Sigma_in <= 0):
            raise DomainError("covariance must be positive")
        E = np.atleast_2d(np.asarray(eps, dtype=float))
        et = E / Sigma_in
        data = np.mean(et * et, axis=0)
        decay = Sigma_in if rule == "error" else 1.0 / Sigma_in
        return np.maximum(Sigma_in + eta * (data - decay), floor)
    S = _as_2d(Sigma_in)
    if not np.allclose(S, S.T, atol=1e-10, rtol=0) or np.linalg.eigvalsh(S)[0] <= 0:
        raise DomainError("covariance must be symmetric positive definite")
    E = np.atleast_2d(np.asarray(eps, dtype=float).reshape(-1, S.shape[0]))
    P = np.linalg.inv(S)
    et = E @ P.T
    data = et.T @ et / E.shape[0]
    if rule == "error":
        decay = S
    elif rule == "gradient":
        decay = P
    else:
        raise ArgumentError(f"unknown precision rule {rule!r}")
    out = project_pd(S + eta * (data - decay), floor)
    return out.reshape(Sigma_in.shape) if Sigma_in.ndim == 0 else out


def layer_objective(Sigma, eps) -> float:
    """e^T Sigma^-1 e + ln det Sigma for one layer (the 2 pi constant dropped)."""
    S = _as_2d(Sigma)
    e = np.asarray(eps, dtype=float).reshape(-1)
    _, logdet = np.linalg.slogdet(S)
    return float(e @ np.linalg.solve(S, e) + logdet)


def integrate_fixed_point(eps, Sigma0=1.0, eta: float = 0.05, tol: float = 1e-13,
                          max_steps: int = 1_000_000, rule: str = "error"):
    """Iterate :func:`precision_step` with a constant error until it stops moving."""
    S = np.asarray(Sigma0, dtype=float)
    for k in range(1, max_steps + 1):
        S_new = precision_step(S, eps, eta, rule=rule)
        if np.max(np.abs(S_new - S)) < tol:
            return S_new, k
        S = S_new
    return S, max_steps


def empirical_fixed_point_check(error_samples, Sigma) -> float:
    """Frobenius norm of mean(e~ e~^T) - Sigma over a sample of errors."""
    E = np.asarray(error_samples, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if E.shape[0] < 100:
        raise ArgumentError("need at least 100 error samples")
    S = _as_2d(Sigma)
    et = E @ np.linalg.inv(S).T
    return float(np.linalg.norm(et.T @ et / E.shape[0] - S))


def numeric_hessian(fun, x, h: float = 1e-4):
    """Central-difference Hessian of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    H = np.empty((n, n))
    I = np.eye(n) * h
    for i in range(n):
        for j in range(i, n):
            v = (fun(x + I[i] + I[j]) - fun(x + I[i] - I[j])
                 - fun(x - I[i] + I[j]) + fun(x - I[i] - I[j])) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H


def fisher_check_mu(params, l: int, mu_above=None, activation="identity", h: float = 1e-4) -> float:
    """Compare the curvature of one layer's energy term with its precision.

    The term (mu_l - f(theta mu_{l+1}))^T P_l (...) has Hessian 2 P_l in mu_l;
    the factor 2 is the dropped 1/2 of the free-energy convention. Returns
    max |H/2 - P_l|.
    """
    if not get_activation(activation).is_linear:
        raise UnsupportedConfigurationError("the Fisher identity is derived for the linear case")
    P = params.precision[l]
    P = np.diag(P) if P.ndim == 1 else P
    d = P.shape[0]
    theta = params.theta[l + 1] if l + 1 < len(params.theta) else None
    if mu_above is None or theta is None:
        pred = np.zeros(d)
    else:
        pred = theta @ np.asarray(mu_above, dtype=float)

    def term(m):
        e = m - pred
        return float(e @ P @ e)

    H = numeric_hessian(term, pred + 0.3, h)
    return float(np.max(np.abs(0.5 * H - P)))


def fisher_theta_report(params, l: int, activity_samples, activation="identity",
                        mu_target=None, h: float = 1e-3) -> dict:
    """Monte-Carlo expected Hessian of the layer term with respect to theta.

    ``params.theta[l+1]`` predicts layer l from ``activity_samples`` (rows of
    mu_{l+1}). The expected Hessian (halved) is compared with
    P_l (x) E[mu mu^T] (second moment) and with P_l (x) V[mu] (variance). The two
    coincide for zero-mean activity. Parameters are ordered row-major
    (``theta.ravel()``), which puts the Kronecker factors as kron(P, M).
    """
    if not get_activation(activation).is_linear:
        raise UnsupportedConfigurationError("the Fisher identity is derived for the linear case")
    X = np.atleast_2d(np.asarray(activity_samples, dtype=float))
    if X.shape[0] == 1 and X.shape[1] > 1 and np.ndim(activity_samples) == 1:
        X = X.T
    theta = params.theta[l + 1]
    P = params.precision[l]
    P = np.diag(P) if P.ndim == 1 else P
    target = np.zeros(theta.shape[0]) if mu_target is None else np.asarray(mu_target, dtype=float)

    def mean_term(flat):
        E = target - X @ flat.reshape(theta.shape).T
        return float(np.mean(np.sum((E @ P) * E, axis=1)))

    H = 0.5 * numeric_hessian(mean_term, theta.ravel(), h)
    second = X.T @ X / X.shape[0]
    var = np.cov(X.T, bias=True).reshape(X.shape[1], X.shape[1])
    return {
        "hessian": H,
        "second_moment_deviation": float(np.max(np.abs(H - np.kron(P, second)))),
        "variance_deviation": float(np.max(np.abs(H - np.kron(P, var)))),
        "predicted_variance_form": np.kron(P, var),
    }


def fisher_check_theta(params, l: int, activity_samples, activation="identity") -> float:
    """Max-abs gap between the expected theta-Hessian (halved) and P (x) E[mu mu^T]."""
    return fisher_theta_report(params, l, activity_samples, activation)["second_moment_deviation"]


def natural_gradient_step(grad, precision):
    """Precondition a mu-gradient by the inverse Fisher (the covariance)."""
    P = np.atleast_2d(np.asarray(precision, dtype=float))
    g = np.atleast_1d(np.asarray(grad, dtype=float))
    return np.linalg.solve(P, g).reshape(np.shape(grad))
