import numpy as np
import pytest

from sigmatch.embedder import PARAM_NAMES, backward, forward


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    if scale < 1e-8:  # both at round-off level: a true zero gradient
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_param_grads(net, x, loss_of_signatures, h=1e-3):
    """Central differences of ``loss_of_signatures(forward(net, x, 'train'))``
    w.r.t. every parameter entry."""
    out = {}
    for name in PARAM_NAMES:
        p = getattr(net, name)
        g = np.zeros_like(p, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = p[i]
            p[i] = orig + h
            up = loss_of_signatures(forward(net, x, mode="train")[0])
            p[i] = orig - h
            down = loss_of_signatures(forward(net, x, mode="train")[0])
            p[i] = orig
            g[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def numeric_input_grad(net, x, loss_of_signatures, h=1e-3):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(*x.shape):
        orig = x[i]
        x[i] = orig + h
        up = loss_of_signatures(forward(net, x, mode="train")[0])
        x[i] = orig - h
        down = loss_of_signatures(forward(net, x, mode="train")[0])
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def analytic_grads(net, x, loss_and_grad):
    sig, cache = forward(net, x, mode="train")
    _, g = loss_and_grad(sig)
    return backward(net, cache, g)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
