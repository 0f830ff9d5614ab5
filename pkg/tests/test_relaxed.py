import numpy as np
import pytest

from predcode.data import one_hot, synth_classification
from predcode.errors import StructuralError
from predcode.network import NetworkParams, NetworkSpec, NetworkState, apply_precision, infer_step, initialize_state
from predcode.relaxed import (RelaxationFlags, alignment_angle, psi_step, relaxed_errors, relaxed_infer_step,
                              zeta_error, zeta_step)
from predcode.training import ClampMode, TrainConfig, apply_clamps, fit, relax

from conftest import random_net


def stepped(state, fn):
    s = state.copy()
    fn(s)
    return s


def max_mu_gap(a, b):
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a.mu, b.mu))


def test_flags_allocation(rng):
    spec = NetworkSpec([3, 4, 2], ["identity", "tanh"])
    flags = RelaxationFlags.init(spec, use_psi=True, use_zeta=True, rng=rng)
    flags.validate(spec)
    assert [p.shape for p in flags.psi[1:]] == [(4, 3), (2, 4)]
    assert [z.shape for z in flags.zeta] == [(3, 3), (4, 4)]
    assert np.all(np.abs(flags.psi[1]) <= 0.05)
    assert RelaxationFlags.init(spec).psi is None
    with pytest.raises(StructuralError):
        RelaxationFlags(use_psi=True).validate(spec)


def test_flags_off_reduce_to_standard_step(rng):
    for _ in range(10):
        spec, params, state = random_net(rng)
        flags = RelaxationFlags.init(spec)
        a = stepped(state, lambda s: infer_step(s, params, spec, 0.05))
        b = stepped(state, lambda s: relaxed_infer_step(s, params, flags, spec, 0.05))
        assert max_mu_gap(a, b) <= 1e-12


def test_psi_equal_theta_transpose_matches_dropped_derivative(rng):
    for _ in range(10):
        spec, params, state = random_net(rng)
        drop = RelaxationFlags.init(spec, drop_derivative=True)
        psi = RelaxationFlags.init(spec, use_psi=True, drop_derivative=True)
        psi.psi = [None] + [t.T.copy() for t in params.theta[1:]]
        a = stepped(state, lambda s: relaxed_infer_step(s, params, drop, spec, 0.05))
        b = stepped(state, lambda s: relaxed_infer_step(s, params, psi, spec, 0.05))
        assert max_mu_gap(a, b) <= 1e-12


def test_random_psi_step_difference(rng):
    spec, params, state = random_net(rng, L=1, activations=["identity"])
    flags = RelaxationFlags.init(spec, use_psi=True, rng=rng)
    eta = 0.05
    a = stepped(state, lambda s: infer_step(s, params, spec, eta))
    b = stepped(state, lambda s: relaxed_infer_step(s, params, flags, spec, eta))
    g = apply_precision(params.precision[0], state.eps[0])
    expected = eta * (flags.psi[1] - params.theta[1].T) @ g
    assert np.allclose(b.mu[1] - a.mu[1], expected, atol=1e-12)


def test_full_reduction_identity_zeta(rng):
    spec, params, state = random_net(rng, L=3, activations=["identity"] * 3)
    flags = RelaxationFlags.init(spec, use_psi=True, use_zeta=True)
    flags.psi = [None] + [t.T.copy() for t in params.theta[1:]]
    a = stepped(state, lambda s: infer_step(s, params, spec, 0.05))
    b = stepped(state, lambda s: relaxed_infer_step(s, params, flags, spec, 0.05))
    assert max_mu_gap(a, b) <= 1e-12


def test_psi_step_zero_error_and_rank(rng):
    psi = rng.normal(size=(3, 2))
    assert np.array_equal(psi_step(psi, rng.normal(size=3), np.zeros(2), 0.1), psi)
    delta = psi_step(psi, rng.normal(size=3), rng.normal(size=2), 0.1) - psi
    assert np.linalg.matrix_rank(delta) <= 1


def test_psi_aligns_with_theta_on_linear_task():
    rng = np.random.default_rng(0)
    x, y, _ = synth_classification(rng, 400, 12, 4, 0.3)
    spec = NetworkSpec([4, 8, 12], ["identity", "identity"], step_size=0.1)
    params = NetworkParams.init(spec, 1)
    flags = RelaxationFlags.init(spec, use_psi=True, rng=2)
    before = [alignment_angle(flags.psi[l], params.theta[l]) for l in (1, 2)]
    fit(x, one_hot(y, 4), params, spec, ClampMode("supervised_backward", 4), TrainConfig(batch_size=20, lr=0.05),
        10, rng=3, flags=flags)
    after = [alignment_angle(flags.psi[l], params.theta[l]) for l in (1, 2)]
    assert all(a < b for a, b in zip(after, before))


def test_zeta_error_identities(rng):
    mu, pred = rng.normal(size=3), rng.normal(size=3)
    Z = rng.normal(size=(3, 3))
    assert np.allclose(zeta_error(mu, pred, np.eye(3)), mu - pred)
    assert np.allclose(zeta_error(mu, pred, np.zeros((3, 3))), mu)
    assert np.allclose(zeta_error(mu, pred, Z) - (mu - pred), (np.eye(3) - Z) @ pred)


def test_zeta_step_hand_values(rng):
    Z = rng.normal(size=(2, 2))
    assert np.array_equal(zeta_step(Z, rng.normal(size=2), np.zeros(2), 0.1), Z)
    assert zeta_step(np.zeros((1, 1)), [2.0], [3.0], 0.1)[0, 0] == pytest.approx(0.6)
    with pytest.raises(StructuralError):
        zeta_step(Z, np.ones(2), np.ones(2), 0.1, rule="gradient")


def test_learned_zeta_lowers_error():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 2)) @ rng.normal(size=(4, 2)).T * 0.5
    spec = NetworkSpec([4, 2], ["identity"], step_size=0.1)
    mode = ClampMode("unsupervised")

    def final_error(zeta_lr):
        params = NetworkParams.init(spec, 1, scale=0.3)
        flags = RelaxationFlags.init(spec, use_zeta=True, rng=2, zeta_init="random")
        fit(X, None, params, spec, mode, TrainConfig(batch_size=20, lr=0.02, zeta_lr=zeta_lr, n_iters=50),
            20, rng=3, flags=flags)
        state = NetworkState.zeros(spec, batch=len(X))
        apply_clamps(mode, X, state)
        initialize_state(state, params, spec, "sweep")
        relax(state, params, spec, flags, 50)
        return float(np.sqrt(np.mean(relaxed_errors(state, params, spec, flags)[0] ** 2)))

    assert final_error(0.01) < final_error(0.0)
