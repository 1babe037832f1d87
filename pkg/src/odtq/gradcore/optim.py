"""Named parameter storage and the adaptive-moment update."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..exceptions import ContractError, TrainingDivergenceError
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class ParamStore:
    """Ordered mapping of parameter name to trainable :class:`Tensor`.

    Optimizer moments live alongside the parameters and are keyed by the
    same names.
    """

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.state: dict[str, dict] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already defined")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray], strict: bool = True):
        """Overwrite parameter values in place from ``arrays``."""
        missing = [k for k in self.params if k not in arrays]
        extra = [k for k in arrays if k not in self.params]
        if strict and (missing or extra):
            raise ContractError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for k, t in self.params.items():
            if k in arrays:
                a = np.asarray(arrays[k], dtype=np.float64)
                if a.shape != t.shape:
                    raise ContractError(f"parameter {k!r}: shape {a.shape} != {t.shape}")
                t.data = a.copy()
        self.state.clear()

    def n_values(self) -> int:
        return sum(t.size for t in self.params.values())


def optimizer_step(store: ParamStore, lr: float) -> ParamStore:
    """One Adam update over every parameter that received a gradient; grads are zeroed."""
    for name, t in store.params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
    for name, t in store.params.items():
        g = t.grad
        if g is None or not t.requires_grad:
            continue
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data), "t": 0}
        st["t"] += 1
        st["m"] = BETA1 * st["m"] + (1.0 - BETA1) * g
        st["v"] = BETA2 * st["v"] + (1.0 - BETA2) * g * g
        m_hat = st["m"] / (1.0 - BETA1 ** st["t"])
        v_hat = st["v"] / (1.0 - BETA2 ** st["t"])
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + EPS)
        t.grad = None
    return store


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    sq = sum(float((t.grad ** 2).sum()) for t in store.params.values() if t.grad is not None)
    norm = float(np.sqrt(sq))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for t in store.params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm
