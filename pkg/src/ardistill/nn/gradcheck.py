"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = fn(*arrays)
            a[i] = old - h
            fm = fn(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a, b, floor=1e-3):
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(build, arrays, h=1e-5, floor=1e-3):
    """Max elementwise relative error between backprop and finite differences.

    ``build`` maps Tensors to a scalar Tensor. Arrays should be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def fn(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    num = numeric_grad(fn, arrays, h)
    ana = analytic_grad(build, arrays)
    return max(float(relative_error(x, y, floor).max()) if x.size else 0.0 for x, y in zip(ana, num))
