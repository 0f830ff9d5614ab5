"""Free energy under a Gaussian (Laplace) posterior instead of a point mass.

Each layer gets q(x_l) = N(mu_l, s_l). With the negative log density
``E_l(x) = -ln N(x; pred_l, Sigma_l)`` expanded to second order around mu_l,

    F_l(s) = E_l(mu_l) + tr(H_l s) / 2 - ln det(2 pi e s) / 2,

minimised at ``s = H_l^-1``, the inverse curvature. Substituting the optimum
removes every trace of ``s`` and leaves ``E_l(mu_l) - ln det(2 pi Sigma_l)/2``.
The point-mass free energy used elsewhere is ``2 * sum_l E_l(mu_l)``, so

    F_dirac = 2 * F_laplace + sum_l ln det(2 pi Sigma_l)

which is the alignment applied by :func:`align_to_point_mass`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedConfigurationError
from .network import (NetworkParams, NetworkSpec, NetworkState, compute_errors,
                      log_det_2pi_cov, quad_form)


@dataclass
class LaplaceResult:
    value: float
    variances: list
    aligned: float


def _as_matrix(P):
    return np.diag(P) if P.ndim == 1 else P


def neg_log_density(e: np.ndarray, P: np.ndarray) -> float:
    """-ln N(e; 0, P^-1) with the usual 1/2 factors."""
    return 0.5 * float(quad_form(P, e)) + 0.5 * log_det_2pi_cov(P)


def layer_curvature(params: NetworkParams, l: int) -> np.ndarray:
    """Hessian of ``-ln p(x_l | mu_{l+1})`` with respect to ``x_l``.

    For a Gaussian factor with a linear mean this is the layer precision,
    independent of where it is evaluated.
    """
    return _as_matrix(params.precision[l])


def optimal_variance(params: NetworkParams, l: int) -> np.ndarray:
    return np.linalg.inv(layer_curvature(params, l))


def expanded_layer_objective(e: np.ndarray, H: np.ndarray, P: np.ndarray, s: np.ndarray) -> float:
    d = H.shape[0]
    _, logdet_s = np.linalg.slogdet(s)
    entropy = 0.5 * (d * np.log(2.0 * np.pi * np.e) + logdet_s)
    return neg_log_density(e, P) + 0.5 * float(np.trace(H @ s)) - entropy


def laplace_free_energy(state: NetworkState, params: NetworkParams, spec: NetworkSpec) -> LaplaceResult:
    """Laplace-route free energy at the current values (single item only)."""
    if not spec.is_linear:
        raise UnsupportedConfigurationError("the Laplace equivalence is only exact for linear activations")
    compute_errors(state, params, spec)
    total = 0.0
    variances = []
    for l, e in enumerate(state.eps):
        H = layer_curvature(params, l)
        s = np.linalg.inv(H)
        variances.append(s)
        total += expanded_layer_objective(e, H, params.precision[l], s)
    return LaplaceResult(value=total, variances=variances, aligned=align_to_point_mass(total, params))


def align_to_point_mass(value: float, params: NetworkParams) -> float:
    return 2.0 * value + sum(log_det_2pi_cov(P) for P in params.precision)
