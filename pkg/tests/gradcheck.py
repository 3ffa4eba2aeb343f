"""Central finite-difference oracle for checking analytic gradients."""

import numpy as np

from mcga.tensor import Tensor


def numeric_grads(fn, arrays, eps=1e-5):
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            vals = []
            for sign in (1.0, -1.0):
                trial = [a.copy() for a in arrays]
                trial[k][idx] += sign * eps
                vals.append(float(fn(*[Tensor(a) for a in trial]).data))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def max_relative_error(fn, arrays, eps=1e-5):
    """max |analytic - numeric| / max |numeric|, taken per input and maximised over inputs."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    worst = 0.0
    for a, n in zip(analytic_grads(fn, arrays), numeric_grads(fn, arrays, eps)):
        scale = max(np.abs(n).max(), 1e-8)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst
