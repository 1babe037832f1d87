"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(f, arrays, eps: float = 1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = float(f(*arrays))
            flat[i] = old - eps
            lo = float(f(*arrays))
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b, floor: float = 1e-10) -> float:
    """``||a - b|| / max(||a||, ||b||)``; zero when both norms are below ``floor``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build_loss, arrays, eps: float = 1e-5) -> float:
    """Max relative error between backprop and finite differences.

    ``build_loss(*tensors)`` must return a scalar :class:`Tensor`; it is called
    once with gradient-tracking leaves and repeatedly with plain values.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    build_loss(*leaves).backward()
    numeric = numerical_grad(lambda *xs: build_loss(*[Tensor(x) for x in xs]).item(),
                             arrays, eps)
    return max(relative_error(l.grad if l.grad is not None else np.zeros_like(l.data), n)
               for l, n in zip(leaves, numeric))
