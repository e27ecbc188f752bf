"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array together with an optional gradient
accumulator and a backward closure linking it to the tensors it was computed
from.  The graph is a DAG built eagerly during the forward pass; calling
:meth:`Tensor.backward` on a scalar output walks the graph in reverse
topological order and accumulates gradients into every reachable leaf with
``requires_grad`` set.

Two numeric modes are supported by construction: parameters are created as
float64 for verification (finite-difference tolerances are unreachable at
float32) or float32 for training.  Ops never mix dtypes; the caller casts
inputs once at the graph boundary.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "ShapeError", "set_check_finite", "check_finite_enabled"]

# When enabled, every op asserts its output is finite.  Tests and the verify
# suite turn this on; training leaves it off for speed.
_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


class ShapeError(ValueError):
    """Raised when operand shapes or dtypes are incompatible."""


class Tensor:
    """A dense n-dimensional array node in the autodiff graph.

    ``data`` is never mutated by ops once written; the optimizer rebinds
    parameter data between graph lifetimes.  ``grad`` accumulates additively
    across backward calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite values in tensor data")

    # -- basics ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data cut loose from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this tensor.

        ``seed`` is the upstream gradient (defaults to ones, i.e. d(self)/d(self));
        a scalar seed scales the whole sweep, which is how REINFORCE weights
        (r - b) enter.  Gradients accumulate: two sweeps double every grad.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                seed = np.broadcast_to(seed, self.data.shape).astype(self.data.dtype)

        order = self._toposort()
        grads: dict[int, np.ndarray] = {id(self): np.array(seed, copy=True)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf parameter / input
                node._accumulate(g)
                continue
            if node._backward is None:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient in backward pass")
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] += pg
                else:
                    # ops may hand the same array to several parents; keep a
                    # private copy so in-place accumulation cannot alias
                    grads[pid] = np.array(pg, copy=True)

    def _toposort(self):
        """Reverse topological order, iterative to survive deep episode graphs."""
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            nid = id(node)
            if done:
                order.append(node)
                continue
            if nid in visited:
                continue
            visited.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        order.reverse()
        return order

    # -- operator sugar (same-shape elementwise; defined in ops.py) -------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self):
        from . import ops
        return ops.mean_all(self)

    def reshape(self, *shape):
        from . import ops
        return ops.reshape(self, shape if len(shape) > 1 else shape[0])


def _finite_guard(arr: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite values produced by op")
    return arr
