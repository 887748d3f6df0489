"""SGD with Nesterov momentum and L2 weight decay, plus the step-decay schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4, nesterov: bool = True):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            g = g + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            update = g + self.momentum * buf if self.nesterov else buf
            p.data -= lr * update


def step_lr(step: int, iterations: int, base_lr: float, decay_points=(0.3, 0.6, 0.8),
            decay_factor: float = 0.8) -> float:
    """Learning rate at ``step`` (0-based): multiplied by ``decay_factor`` at each fraction passed."""
    passed = sum(step >= int(round(f * iterations)) for f in decay_points)
    return base_lr * decay_factor ** passed
