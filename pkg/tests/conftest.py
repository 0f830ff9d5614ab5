import numpy as np
import pytest

from predcode.network import NetworkParams, NetworkSpec, NetworkState, compute_errors


def central_diff(fun, x, h=1e-6):
    """Centered finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def random_pd(rng, d, jitter=0.5):
    M = rng.normal(size=(d, d))
    return M @ M.T / d + jitter * np.eye(d)


def random_net(rng, L=None, max_dim=6, activations=None, full_precision=True):
    L = L or int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, max_dim + 1, size=L + 1)]
    if activations is None:
        activations = list(rng.choice(["identity", "tanh", "logistic"], size=L))
    spec = NetworkSpec(dims, activations, prior_mean=rng.normal(size=dims[-1]))
    params = NetworkParams.init(spec, rng, scale=0.7)
    if full_precision:
        params.precision = [random_pd(rng, d) for d in dims]
    state = NetworkState(mu=[rng.normal(size=d) for d in dims])
    compute_errors(state, params, spec)
    return spec, params, state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def report(criterion: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
