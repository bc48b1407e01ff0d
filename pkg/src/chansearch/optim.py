"""Momentum SGD, Adam, cosine schedule and gradient-norm clipping.

Optimizer state is keyed by parameter name so that a parameter whose array is
swapped for a resized one (see :mod:`chansearch.dynalloc`) keeps its buffers.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at step 0 down to 0 at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps) / total_steps
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


class Optimizer:
    kind = "base"

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        names = [p.name for p in params]
        if any(n is None for n in names) or len(set(names)) != len(names):
            raise ValueError("optimizer parameters need unique names")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state: dict[str, dict[str, np.ndarray | int]] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
        if self.lr == 0.0:
            return
        for p in self.params:
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._update(p, g, self.state.setdefault(p.name, {}))

    def _update(self, p: Tensor, g: np.ndarray, st: dict) -> None:
        raise NotImplementedError

    def resize_state(self, name: str, new_shape: tuple[int, ...]) -> None:
        """Re-key buffers of ``name`` to ``new_shape``: keep the leading overlap, zero the rest."""
        st = self.state.get(name)
        if not st:
            return
        for key, buf in st.items():
            if not isinstance(buf, np.ndarray):
                continue
            fresh = np.zeros(new_shape, dtype=buf.dtype)
            overlap = tuple(slice(0, min(a, b)) for a, b in zip(buf.shape, new_shape))
            fresh[overlap] = buf[overlap]
            st[key] = fresh

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "state": self.state}

    def load_state_dict(self, sd: dict) -> None:
        if sd["kind"] != self.kind:
            raise ValueError(f"optimizer kind mismatch: {sd['kind']} vs {self.kind}")
        self.lr = sd["lr"]
        self.state = {k: dict(v) for k, v in sd["state"].items()}


class SGD(Optimizer):
    """SGD with heavy-ball momentum; decay is added to the gradient."""

    kind = "momentum-sgd"

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum

    def _update(self, p, g, st):
        if self.momentum:
            buf = st.get("momentum")
            buf = g.copy() if buf is None else self.momentum * buf + g
            st["momentum"] = buf
            g = buf
        p.data = p.data - self.lr * g


class Adam(Optimizer):
    kind = "adaptive-moments"

    def __init__(self, params, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.betas = betas
        self.eps = eps

    def _update(self, p, g, st):
        b1, b2 = self.betas
        m = st.get("exp_avg")
        v = st.get("exp_avg_sq")
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        t = int(st.get("step", 0)) + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        st.update(exp_avg=m, exp_avg_sq=v, step=t)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
