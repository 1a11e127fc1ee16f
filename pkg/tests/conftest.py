import numpy as np
import pytest

from rcg.tensor import Tape, backward


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(build_loss, params, eps=1e-5):
    """Independent central-difference oracle: (f(x+eps) - f(x-eps)) / 2eps.

    Deliberately separate from rcg.tensor.grad_check so tests never verify
    the library against itself.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build_loss().data)
            flat[i] = orig - eps
            f_minus = float(build_loss().data)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g.reshape(p.data.shape))
    return grads


def tape_grad(build_loss, params):
    """Analytic gradients for the same loss via the tape."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    return [p.grad.copy() for p in params]


def assert_grads_close(build_loss, params, tol=1e-4):
    analytic = tape_grad(build_loss, params)
    numeric = numeric_grad(build_loss, params)
    for p, a, n in zip(params, analytic, numeric):
        rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
        assert rel.max() < tol, f"{p.name}: max rel err {rel.max():.3e}"
