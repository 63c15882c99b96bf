"""Finite-difference gradient machinery shared by the op and acceptance tests.

The oracle is a central difference computed from plain forward passes, so
it is independent of the reverse-mode implementation under test.
"""

import numpy as np

from subformer import autograd as ag


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _projection(shape, seed=99):
    # Fixed random weights; a plain output sum would have zero gradient
    # through row-stochastic ops like softmax.
    return np.random.default_rng(seed).normal(size=shape)


def scalarize(out: ag.Tensor, weights: np.ndarray) -> ag.Tensor:
    return ag.sum_(ag.mul(out, ag.Tensor(weights, dtype=np.float64)))


def check_op(build, x: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central differences.

    ``build`` maps a leaf Tensor to an output Tensor; the probed scalar is
    a fixed random projection of the output.  The same array object is
    perturbed in place for the numeric passes.
    """
    x = np.asarray(x, dtype=np.float64)
    probe = build(ag.Tensor(x, dtype=np.float64))
    weights = _projection(probe.data.shape)

    leaf = ag.Tensor(x, requires_grad=True, dtype=np.float64)
    with ag.Tape() as tape:
        ag.backward(scalarize(build(leaf), weights), tape)
    ana = np.zeros_like(x) if leaf.grad is None else leaf.grad.copy()

    shared = x.copy()

    def forward():
        return float(scalarize(build(ag.Tensor(shared, dtype=np.float64)),
                               weights).data.reshape(-1)[0])

    num = numeric_grad(forward, shared, h)
    return rel_error(ana, num)
