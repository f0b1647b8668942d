"""SGD with momentum and decoupled-from-nothing weight decay.

Update convention, applied per parameter::

    v <- momentum * v + (grad + weight_decay * w)
    w <- w - lr * v

Gradients are left untouched by :meth:`Sgd.step`; the caller zeroes them.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class Sgd:
    """Momentum SGD over a name -> parameter mapping.

    Parameters whose ``grad`` is None at step time are skipped (they were
    unreachable from the loss, e.g. a classifier head behind a zero
    coefficient) and keep their momentum buffers untouched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be strictly positive")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
        }

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            if lr <= 0:
                raise ValueError("learning rate must be strictly positive")
            self.lr = float(lr)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            v = self.velocity[name]
            if v.shape != p.data.shape:
                raise ShapeError(f"momentum buffer shape {v.shape} != parameter {p.data.shape} ({name})")
            g_eff = g
            if self.weight_decay:
                g_eff = g + self.weight_decay * p.data
            v *= self.momentum
            v += g_eff
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Momentum buffers, keyed like the parameters (for checkpoints)."""
        return self.velocity

    def load_state_tensors(self, buffers: dict[str, np.ndarray]) -> None:
        for name, arr in buffers.items():
            if name not in self.velocity:
                raise KeyError(f"momentum buffer for unknown parameter {name!r}")
            if arr.shape != self.velocity[name].shape:
                raise ShapeError(f"momentum buffer shape mismatch for {name!r}")
            self.velocity[name] = arr.astype(self.velocity[name].dtype, copy=True)
