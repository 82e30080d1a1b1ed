"""Shared oracles and helpers.

The reference implementations here are deliberately primitive (plain loops
over definitions) and independent of the library's computation paths.
"""

import numpy as np
import pytest

from ssmfusion import GradTape, Tensor, backward
from ssmfusion import tensor as T


def reference_scan(a_bar, b_bar, c_proj, x):
    """Brute-force recurrence oracle: returns (h, y) with h of shape (L, C, N)."""
    ll, cc, nn = a_bar.shape
    h = np.zeros((cc, nn), dtype=a_bar.dtype)
    hs = np.empty((ll, cc, nn), dtype=a_bar.dtype)
    y = np.empty((ll, cc), dtype=a_bar.dtype)
    for t in range(ll):
        h = a_bar[t] * h + b_bar[t] * x[t][:, None]
        hs[t] = h
        for c in range(cc):
            y[t, c] = float(np.dot(c_proj[t], h[c]))
    return hs, y


def central_fd(f, array, index, step=1e-5):
    """Two-sided finite difference of scalar ``f()`` w.r.t. one array entry."""
    flat = array.reshape(-1)
    orig = flat[index]
    flat[index] = orig + step
    f_plus = f()
    flat[index] = orig - step
    f_minus = f()
    flat[index] = orig
    return (f_plus - f_minus) / (2.0 * step)


def rel_err(a, b, floor=1e-3):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_op_gradients(build_inputs, op, n_instances=20, seed=0, tol=1e-4, step=1e-5):
    """FD-check an op's analytic gradients on random f64 instances.

    ``build_inputs(rng)`` returns a list of (array, differentiable) pairs;
    ``op(*tensors)`` returns the output tensor.  Every differentiable input
    has up to six coordinates checked per instance.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        specs = build_inputs(rng)
        arrays = [np.asarray(a, dtype=np.float64) for a, _ in specs]
        tensors = [Tensor(a, requires_grad=diff) for a, (_, diff) in zip(arrays, specs)]
        probe = None

        def run():
            nonlocal probe
            out = op(*tensors)
            if probe is None:
                probe = rng.standard_normal(out.shape)
            return float((out.data * probe).sum())

        run()
        for t in tensors:
            t.grad = None
        with GradTape() as tape:
            out = op(*tensors)
            loss = T.sum_all(T.mul(out, Tensor(probe, dtype=np.float64)))
        backward(loss, tape)
        for arr, t, (_, diff) in zip(arrays, tensors, specs):
            if not diff:
                continue
            assert t.grad is not None
            coords = rng.choice(arr.size, size=min(6, arr.size), replace=False)
            for i in coords:
                fd = central_fd(run, t.data, i, step)
                worst = max(worst, rel_err(t.grad.reshape(-1)[i], fd))
    assert worst <= tol, f"max relative gradient error {worst:.3e} exceeds {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
