import numpy as np
import pytest

from ifssl.netcore import NetworkParams, init_params

ACCEPTANCE_LINES = []


def central_diff(f, x, h=1e-4):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grads_match(analytic, numeric, rel=1e-4, abs_floor=1e-6):
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    err = np.abs(a - n)
    return bool(np.all((err <= abs_floor) | (err <= rel * np.maximum(np.abs(a), np.abs(n)))))


def param_fd(params: NetworkParams, loss_of_params, h=1e-4):
    """Finite-difference gradient of ``loss_of_params(params)`` for every tensor."""
    tensors = [t.copy() for t in params.tensors()]
    out = []
    for k in range(len(tensors)):
        def f(t, k=k):
            ts = list(tensors)
            ts[k] = t
            return loss_of_params(NetworkParams.from_tensors(ts, params.activation))

        out.append(central_diff(f, tensors[k], h))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net(rng):
    return init_params([3, 5, 4, 3], rng, "tanh")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
