import numpy as np
import pytest

from gnmr import ndgrad as nd


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def grad_of(build, *arrays):
    """Analytic gradients of build(*tensors) w.r.t. each array."""
    ts = [nd.Tensor(a, requires_grad=True) for a in arrays]
    with nd.Tape() as tape:
        loss = build(*ts)
    g = tape.backward(loss)
    return [g.get(t, np.zeros(t.shape)) for t in ts]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
