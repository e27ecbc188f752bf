"""ADAM with decoupled weight decay.

One optimizer instance owns a named parameter dict and keeps first/second
moment accumulators per parameter.  Updates are applied in sorted name order
so that a training step is a deterministic function of (params, grads, state).
Weight decay is decoupled: it shrinks the parameter directly instead of being
folded into the gradient.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["Adam"]


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-7):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        """Apply one update from the accumulated grads; missing grads count as zero."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            new = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p.data
            # rebind rather than mutate: live graphs keep their forward values
            p.data = new.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- persistence --------------------------------------------------------

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.params):
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"{prefix}.m.{name}"], copy=True)
            self.v[name] = np.array(arrays[f"{prefix}.v.{name}"], copy=True)
        self.t = int(t)
