"""Linear-Gaussian state space: Kalman filter and its predictive coding form.

Model::

    x_{t+1} = A x_t + B u_t + w,   w ~ N(0, Sigma1)
    o_{t+1} = C x_{t+1} + v,       v ~ N(0, Sigma2)

The iterative solver descends

    L(mu) = (o - C mu)^T Sigma2^-1 (o - C mu) + (mu - m)^T Pp (mu - m)

with ``m = A mu_prev + B u``. ``Pp`` defaults to ``Sigma1^-1``; passing the
inverse of the projected Kalman covariance makes the minimiser coincide with
the Kalman posterior mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError, NumericalError, StructuralError


def _sym(M):
    return 0.5 * (M + M.T)


def _check_pd(M, name, allow_psd=False):
    if not np.allclose(M, M.T, atol=1e-10, rtol=0):
        raise DomainError(f"{name} is not symmetric")
    lo = np.linalg.eigvalsh(M)[0]
    if lo < 0 or (lo == 0 and not allow_psd):
        raise DomainError(f"{name} is not positive definite")


@dataclass
class LinearStateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Sigma1: np.ndarray
    Sigma2: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(n, -1)
        self.Sigma1 = np.atleast_2d(np.asarray(self.Sigma1, dtype=float))
        self.Sigma2 = np.atleast_2d(np.asarray(self.Sigma2, dtype=float))
        p = self.C.shape[0]
        if self.A.shape != (n, n) or self.C.shape[1] != n:
            raise StructuralError("A must be n x n and C must be p x n")
        if self.Sigma1.shape != (n, n) or self.Sigma2.shape != (p, p):
            raise StructuralError("noise covariances have the wrong shapes")
        # a zero process covariance is allowed for deterministic projections
        _check_pd(self.Sigma1, "Sigma1", allow_psd=True)
        _check_pd(self.Sigma2, "Sigma2", allow_psd=True)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def copy(self) -> "LinearStateSpace":
        return LinearStateSpace(self.A.copy(), self.B.copy(), self.C.copy(),
                                self.Sigma1.copy(), self.Sigma2.copy())


@dataclass
class BeliefState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise StructuralError("belief covariance does not match the mean")


def _control(u, model):
    if u is None:
        return np.zeros(model.m)
    return np.atleast_1d(np.asarray(u, dtype=float))


def kf_project(belief: BeliefState, u, model: LinearStateSpace) -> BeliefState:
    mean = model.A @ belief.mean + model.B @ _control(u, model)
    cov = _sym(model.A @ belief.cov @ model.A.T + model.Sigma1)
    return BeliefState(mean, cov)


def kalman_gain(cov_pred, model):
    S = model.C @ cov_pred @ model.C.T + model.Sigma2
    try:
        return np.linalg.solve(S.T, (cov_pred @ model.C.T).T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is singular") from exc


def kf_correct(predicted: BeliefState, o, model: LinearStateSpace) -> BeliefState:
    o = np.atleast_1d(np.asarray(o, dtype=float))
    K = kalman_gain(predicted.cov, model)
    mean = predicted.mean + K @ (o - model.C @ predicted.mean)
    cov = _sym((np.eye(model.n) - K @ model.C) @ predicted.cov)
    return BeliefState(mean, cov)


def map_hessian(model: LinearStateSpace, prior_precision=None) -> np.ndarray:
    """Hessian of L/2: C^T Sigma2^-1 C + prior precision."""
    Pp = np.linalg.inv(model.Sigma1) if prior_precision is None else prior_precision
    return model.C.T @ np.linalg.solve(model.Sigma2, model.C) + Pp


def stable_step_bound(model: LinearStateSpace, prior_precision=None) -> float:
    """Largest stable step for the gradient iteration, 2 / lambda_max."""
    return 2.0 / float(np.linalg.eigvalsh(_sym(map_hessian(model, prior_precision)))[-1])


def map_gradient(mu, prev_mean, u, o, model, prior_precision=None):
    """dL/dmu / 2 at ``mu``, in precision form."""
    Pp = np.linalg.inv(model.Sigma1) if prior_precision is None else prior_precision
    eps_o = o - model.C @ mu
    eps_x = mu - model.A @ prev_mean - model.B @ _control(u, model)
    return -model.C.T @ np.linalg.solve(model.Sigma2, eps_o) + Pp @ eps_x


def pc_linear_solve(prev_mean, u, o, model: LinearStateSpace, eta: float | None = None,
                    iters: int = 100_000, tol: float = 1e-12, prior_precision=None,
                    init=None) -> np.ndarray:
    """Gradient iteration on the filtering objective; returns the MAP mean.

    ``eta`` defaults to ``2 / (lambda_min + lambda_max)``, the fastest fixed
    step for a quadratic; a step at or above the stability bound ``2 /
    lambda_max`` is rejected up front. Stops when the max-abs step is below
    ``tol``.
    """
    prev_mean = np.atleast_1d(np.asarray(prev_mean, dtype=float))
    o = np.atleast_1d(np.asarray(o, dtype=float))
    Pp = np.linalg.inv(model.Sigma1) if prior_precision is None else np.asarray(prior_precision, dtype=float)
    S2inv = np.linalg.inv(model.Sigma2)
    lam = np.linalg.eigvalsh(_sym(map_hessian(model, Pp)))
    bound = 2.0 / float(lam[-1])
    if eta is None:
        eta = 2.0 / float(lam[0] + lam[-1])
    elif eta >= bound:
        raise DivergenceError(f"step size {eta} exceeds the stability bound {bound:.6g}", iteration=0)
    drive = model.A @ prev_mean + model.B @ _control(u, model)
    mu = drive.copy() if init is None else np.array(init, dtype=float)
    CtS2 = model.C.T @ S2inv
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, iters + 1):
            step = eta * (CtS2 @ (o - model.C @ mu) - Pp @ (mu - drive))
            mu = mu + step
            if not np.all(np.isfinite(mu)):
                raise DivergenceError(f"linear PC solve diverged at iteration {it}", iteration=it)
            if np.max(np.abs(step)) < tol:
                break
    return mu


def filter_pc(observations, controls, model: LinearStateSpace, mean0, cov0, **solve_kw):
    """Run the predictive coding filter over a trajectory.

    The covariance is propagated by the Kalman recursions; the mean comes from
    the iterative solver, fed its own previous estimate.
    """
    belief = BeliefState(mean0, cov0)
    means = []
    for t, o in enumerate(observations):
        u = None if controls is None else controls[t]
        pred = kf_project(belief, u, model)
        mu = pc_linear_solve(belief.mean, u, o, model, prior_precision=np.linalg.inv(pred.cov), **solve_kw)
        corrected = kf_correct(pred, o, model)
        belief = BeliefState(mu, corrected.cov)
        means.append(mu)
    return np.array(means)


def filter_kf(observations, controls, model: LinearStateSpace, mean0, cov0):
    belief = BeliefState(mean0, cov0)
    means = []
    for t, o in enumerate(observations):
        u = None if controls is None else controls[t]
        belief = kf_correct(kf_project(belief, u, model), o, model)
        means.append(belief.mean)
    return np.array(means)


def learn_ssm_step(mu_next, mu, u, o, model: LinearStateSpace, eta: float,
                   learn=("A", "B", "C")) -> LinearStateSpace:
    """Hebbian descent on A, B, C from one transition; returns an updated copy.

    Each update is ``-dL/d(.) / 2``:
    dA = P1 eps_x mu^T, dB = P1 eps_x u^T, dC = P2 eps_o mu_next^T.
    """
    mu_next = np.atleast_1d(np.asarray(mu_next, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    o = np.atleast_1d(np.asarray(o, dtype=float))
    u = _control(u, model)
    eps_x = mu_next - model.A @ mu - model.B @ u
    eps_o = o - model.C @ mu_next
    gx = np.linalg.solve(model.Sigma1, eps_x)
    go = np.linalg.solve(model.Sigma2, eps_o)
    new = model.copy()
    if "A" in learn:
        new.A = model.A + eta * np.outer(gx, mu)
    if "B" in learn:
        new.B = model.B + eta * np.outer(gx, u)
    if "C" in learn:
        new.C = model.C + eta * np.outer(go, mu_next)
    return new


def ssm_loss(mu_next, mu, u, o, model: LinearStateSpace) -> float:
    eps_x = mu_next - model.A @ mu - model.B @ _control(u, model)
    eps_o = o - model.C @ mu_next
    return float(eps_o @ np.linalg.solve(model.Sigma2, eps_o) + eps_x @ np.linalg.solve(model.Sigma1, eps_x))


def read_trajectory(path):
    """Read a delimited trajectory file with ``u*`` and ``o*`` columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, 0)), np.zeros((0, 0))
    ucols = [k for k in rows[0] if k.startswith("u")]
    ocols = [k for k in rows[0] if k.startswith("o")]
    U = np.array([[float(r[k]) for k in ucols] for r in rows]) if ucols else None
    O = np.array([[float(r[k]) for k in ocols] for r in rows])
    return U, O


def write_trajectory(path, observations, controls=None):
    O = np.atleast_2d(np.asarray(observations, dtype=float))
    if O.shape[0] == 1 and O.shape[1] > 1 and np.ndim(observations) == 1:
        O = O.T
    header = []
    if controls is not None:
        U = np.asarray(controls, dtype=float).reshape(O.shape[0], -1)
        header += [f"u{i}" for i in range(U.shape[1])]
    header += [f"o{i}" for i in range(O.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(O.shape[0]):
            row = [] if controls is None else [repr(float(x)) for x in U[t]]
            w.writerow(row + [repr(float(x)) for x in O[t]])


def random_system(rng=None, n: int = 4, m: int = 1, p: int = 3, radius: float = 0.95) -> LinearStateSpace:
    """A random stable system with well-conditioned noise covariances."""
    rng = np.random.default_rng(rng)
    A = rng.normal(size=(n, n))
    A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    B = rng.normal(size=(n, m))
    C = rng.normal(size=(p, n))

    def cov(d):
        M = rng.normal(size=(d, d))
        return 0.5 * M @ M.T / d + 0.1 * np.eye(d)

    return LinearStateSpace(A, B, C, cov(n), cov(p))
