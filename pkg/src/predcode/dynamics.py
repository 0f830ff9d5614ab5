"""Generalised coordinates of motion, active inference and PID control.

A generalised state stacks K orders ``[mu, mu', mu'', ...]``. The linear model
used here, per order k = 0..K-1::

    eps_o[k] = o[k] - C mu[k]
    eps_x[k] = mu[k+1] - G (mu[k] - setpoint[k])      (mu[K] := 0)

with free energy ``F = 1/2 sum_k eps_o^T Po eps_o + eps_x^T Px eps_x`` and the
flow ``d mu~/dt = D mu~ - dF/dmu~``. With K = 1 and ``G = -I`` this is the
static single-layer model: eps_x = mu - setpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DivergenceError, StructuralError


@dataclass
class GeneralizedState:
    orders: np.ndarray  # (K, n)

    def __post_init__(self):
        self.orders = np.atleast_2d(np.asarray(self.orders, dtype=float))
        if self.orders.shape[0] < 1:
            raise StructuralError("need at least one order of motion")

    @classmethod
    def zeros(cls, n: int, K: int = 3) -> "GeneralizedState":
        return cls(np.zeros((K, n)))

    @property
    def K(self) -> int:
        return self.orders.shape[0]

    def copy(self) -> "GeneralizedState":
        return GeneralizedState(self.orders.copy())


def shift(gen: GeneralizedState) -> GeneralizedState:
    """D[mu, mu', ..., mu^(K-1)] = [mu', ..., mu^(K-1), 0]."""
    out = np.zeros_like(gen.orders)
    out[:-1] = gen.orders[1:]
    return GeneralizedState(out)


@dataclass
class GeneralizedModel:
    C: np.ndarray
    G: np.ndarray
    setpoint: np.ndarray  # (K, n)
    obs_precision: np.ndarray  # (K, p, p)
    state_precision: np.ndarray  # (K, n, n)

    @classmethod
    def build(cls, n: int, K: int = 3, C=None, G=None, setpoint=0.0, obs_precision=1.0,
              state_precision=1.0) -> "GeneralizedModel":
        C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        G = -np.eye(n) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
        p = C.shape[0]
        sp = np.asarray(setpoint, dtype=float)
        sp = np.broadcast_to(sp if sp.ndim == 2 else sp.reshape(-1) if sp.ndim else sp, (K, n)).copy()
        return cls(C, G, sp, _prec(obs_precision, K, p), _prec(state_precision, K, n))

    @property
    def K(self) -> int:
        return self.setpoint.shape[0]

    def errors(self, gen: GeneralizedState, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        mu = gen.orders
        if mu.shape != self.setpoint.shape or obs.shape[0] != self.K:
            raise StructuralError("generalised state, observations and model disagree on K or n")
        eps_o = obs - mu @ self.C.T
        nxt = np.vstack([mu[1:], np.zeros((1, mu.shape[1]))])
        eps_x = nxt - (mu - self.setpoint) @ self.G.T
        return eps_o, eps_x

    def free_energy(self, gen: GeneralizedState, obs) -> float:
        eps_o, eps_x = self.errors(gen, obs)
        F = 0.0
        for k in range(self.K):
            F += eps_o[k] @ self.obs_precision[k] @ eps_o[k] + eps_x[k] @ self.state_precision[k] @ eps_x[k]
        return 0.5 * float(F)

    def gradient(self, gen: GeneralizedState, obs) -> np.ndarray:
        """dF/dmu~ for every order."""
        eps_o, eps_x = self.errors(gen, obs)
        K = self.K
        g = np.zeros_like(gen.orders)
        for k in range(K):
            wo = self.obs_precision[k] @ eps_o[k]
            wx = self.state_precision[k] @ eps_x[k]
            g[k] += -self.C.T @ wo - self.G.T @ wx
            if k > 0:
                g[k] += self.state_precision[k - 1] @ eps_x[k - 1]
        return g


def _prec(x, K, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return np.broadcast_to(x * np.eye(d), (K, d, d)).copy()
    if x.ndim == 1:
        # one scalar precision per order
        if x.shape[0] != K:
            raise StructuralError(f"expected {K} per-order precisions")
        return np.stack([v * np.eye(d) for v in x])
    if x.ndim == 2:
        return np.broadcast_to(x, (K, d, d)).copy()
    return x


def generalized_step(gen: GeneralizedState, model: GeneralizedModel, obs, eta: float) -> GeneralizedState:
    """One Euler step of d mu~/dt = D mu~ - dF/dmu~."""
    flow = shift(gen).orders - model.gradient(gen, obs)
    out = gen.orders + eta * flow
    if not np.all(np.isfinite(out)):
        raise DivergenceError("generalised filtering diverged")
    return GeneralizedState(out)


def relax_generalized(gen, model, obs, eta: float = 0.05, iters: int = 20_000, tol: float = 1e-12,
                      include_motion: bool = True):
    """Iterate the flow with fixed observations until it stops moving."""
    for k in range(1, iters + 1):
        if include_motion:
            nxt = generalized_step(gen, model, obs, eta)
        else:
            nxt = GeneralizedState(gen.orders - eta * model.gradient(gen, obs))
        if np.max(np.abs(nxt.orders - gen.orders)) < tol:
            return nxt, k
        gen = nxt
    return gen, iters


# ---------------------------------------------------------------------------
# action


@dataclass
class ActionConfig:
    forward_model: np.ndarray  # do/da, shape (p, m)
    action_prior: np.ndarray | float = 0.0
    action_precision: np.ndarray | float = 0.0
    step_size: float = 0.1

    def __post_init__(self):
        self.forward_model = np.atleast_2d(np.asarray(self.forward_model, dtype=float))


def action_step(o, setpoint, cfg: ActionConfig, obs_precision) -> np.ndarray:
    """da/dt = -(do/da)^T P_o (o - setpoint)."""
    eps_o = np.atleast_1d(np.asarray(o, dtype=float) - np.asarray(setpoint, dtype=float))
    if cfg.forward_model.shape[0] != eps_o.shape[0]:
        raise StructuralError("forward model rows must match the observation dimension")
    Po = np.atleast_2d(np.asarray(obs_precision, dtype=float))
    if Po.shape == (1, 1) and eps_o.shape[0] > 1:
        Po = Po[0, 0] * np.eye(eps_o.shape[0])
    return -cfg.forward_model.T @ (Po @ eps_o)


def action_step_with_cost(o, setpoint, a, cfg: ActionConfig, obs_precision) -> np.ndarray:
    """Action update with a quadratic cost around the prior action."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    eps_a = a - np.asarray(cfg.action_prior, dtype=float)
    Pa = np.atleast_2d(np.asarray(cfg.action_precision, dtype=float))
    if Pa.shape == (1, 1):
        Pa = Pa[0, 0] * np.eye(a.shape[0])
    return action_step(o, setpoint, cfg, obs_precision) - Pa @ eps_a


# ---------------------------------------------------------------------------
# PID


def pid_reference(error_history, k_p: float, k_i: float, k_d: float, dt: float) -> float:
    """Discrete PID output for the latest sample of ``error_history``.

    Proportional on the last error, trapezoidal integral and backward
    difference derivative. The error before the first sample is taken to be
    zero (the loop starts at rest).
    """
    if dt <= 0:
        raise ArgumentError("dt must be positive")
    e = np.asarray(error_history, dtype=float).ravel()
    if e.size == 0:
        raise ArgumentError("need at least one error sample")
    padded = np.concatenate([[0.0], e])
    integral = dt * float(np.sum(0.5 * (padded[1:] + padded[:-1])))
    derivative = (padded[-1] - padded[-2]) / dt
    return k_p * e[-1] + k_i * integral + k_d * derivative


class PIDController:
    """Incremental form of :func:`pid_reference` (same outputs, O(1) per step)."""

    def __init__(self, k_p, k_i, k_d, dt):
        if dt <= 0:
            raise ArgumentError("dt must be positive")
        self.k_p, self.k_i, self.k_d, self.dt = k_p, k_i, k_d, dt
        self.prev = 0.0
        self.integral = 0.0

    def step(self, err: float) -> float:
        self.integral += self.dt * 0.5 * (err + self.prev)
        out = self.k_p * err + self.k_i * self.integral + self.k_d * (err - self.prev) / self.dt
        self.prev = err
        return out


class PCPIDController:
    """Active inference controller on a three-order identity model.

    Generalised observations are estimated from the stream: ``o'`` and ``o''``
    by backward differences, and the zeroth order as the mean over the last
    interval, so all three are consistent with trapezoidal integration of the
    action flow

        da/dt = -s0 (o - sp) - s1 o' - s2 o''

    where the setpoint is constant, so its derivatives vanish. The stream is
    taken to start at rest at the setpoint.
    """

    def __init__(self, setpoint: float, precisions, dt: float, a0: float = 0.0):
        if dt <= 0:
            raise ArgumentError("dt must be positive")
        self.setpoint = float(setpoint)
        self.s0, self.s1, self.s2 = (float(p) for p in precisions)
        self.dt = dt
        self.a = float(a0)
        self.err = [0.0, 0.0]  # e[t-2], e[t-1]

    def generalized_errors(self, o: float):
        e2, e1 = self.err
        e0 = float(o) - self.setpoint
        mean = 0.5 * (e0 + e1)
        vel = (e0 - e1) / self.dt
        acc = (e0 - 2.0 * e1 + e2) / self.dt ** 2
        return e0, mean, vel, acc

    def step(self, o: float) -> float:
        e0, mean, vel, acc = self.generalized_errors(o)
        da = -(self.s0 * mean + self.s1 * vel + self.s2 * acc)
        self.a += self.dt * da
        self.err = [self.err[1], e0]
        return self.a


def pc_pid_controller(observations, setpoint: float, precisions, dt: float) -> np.ndarray:
    """Control stream produced by :class:`PCPIDController` over a recorded stream."""
    ctrl = PCPIDController(setpoint, precisions, dt)
    return np.array([ctrl.step(o) for o in np.asarray(observations, dtype=float).ravel()])


def step_disturbance(n_steps: int, dt: float, steps=((0.25, 1.0), (0.6, -0.5))):
    """Piecewise-constant disturbance: ``(fraction of run, level)`` switch points."""
    d = np.zeros(n_steps)
    for frac, level in steps:
        d[int(frac * n_steps):] = level
    return d


def colored_noise(n: int, width: float, rng=None, scale: float = 1.0) -> np.ndarray:
    """White Gaussian noise smoothed by a normalised Gaussian kernel of ``width`` samples."""
    rng = np.random.default_rng(rng)
    half = int(np.ceil(4 * width))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    k /= np.sqrt(np.sum(k ** 2))
    w = rng.standard_normal(n + 2 * half)
    return scale * np.convolve(w, k, mode="valid")


def simulate_plant(controller, n_steps: int, dt: float, setpoint: float, o0: float = 0.0,
                   disturbance=None, sign: float = 1.0):
    """Integrate the 1-D plant do/dt = a + d under ``controller`` (callable o -> a).

    ``sign`` multiplies the controller output before it reaches the plant.
    Returns arrays ``t, o, a``.
    """
    d = np.zeros(n_steps) if disturbance is None else np.asarray(disturbance, dtype=float)
    o = float(o0)
    ts, os_, as_ = [], [], []
    for t in range(n_steps):
        a = sign * controller(o)
        ts.append(t * dt)
        os_.append(o)
        as_.append(a)
        o = o + dt * (a + d[t])
    return np.array(ts), np.array(os_), np.array(as_)


def overshoot(o, setpoint: float, start: float) -> float:
    """Peak excursion past the setpoint, relative to the initial distance."""
    o = np.asarray(o, dtype=float)
    gap = setpoint - start
    return float(max(0.0, np.max((o - setpoint) * np.sign(gap))) / abs(gap))


def write_trajectory_log(path, t, o, a, F=None):
    """Delimited log with columns t, o, a, F."""
    F = np.zeros_like(np.asarray(t, dtype=float)) if F is None else F
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "o", "a", "F"])
        for row in zip(t, o, a, F):
            w.writerow([repr(float(x)) for x in row])
