"""SGD with optional Nesterov momentum and weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGD:
    """Momentum SGD over a list of parameter tensors.

    Update rule per parameter (g = grad + weight_decay * w):

        v <- momentum * v + g
        w <- w - lr * (g + momentum * v)   (nesterov)
        w <- w - lr * v                    (otherwise)

    With momentum = 0 both reduce to plain gradient descent.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 nesterov: bool = False, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                if self.nesterov:
                    p.data -= self.lr * (g + self.momentum * v)
                else:
                    p.data -= self.lr * v
            else:
                v[...] = g
                p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> list[np.ndarray]:
        return self.velocities

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != len(self.velocities):
            raise ValueError("optimizer state length mismatch")
        for v, a in zip(self.velocities, arrays):
            if v.shape != a.shape:
                raise ValueError("optimizer state shape mismatch")
            v[...] = a
