"""Differentiable operations over :class:`~patchwalk.ndcore.tensor.Tensor`.

The op set is exactly what the two networks need: 2-d convolution and its
transpose (single image, channels-first, no batch axis), affine maps, a GRU
cell, softmax, leaky rectification, elementwise arithmetic, reductions and
shape surgery.  No broadcasting beyond the few documented cases.

Convolutions are im2col + gemm.  conv2d kernels are laid out
``[C_out, C_in, kh, kw]``; deconv2d kernels ``[C_in, C_out, kh, kw]``.  With
matched stride and padding the two ops are exact adjoints of one another for
the same kernel array, which the test suite checks via the inner-product
identity.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, check_finite_enabled

__all__ = [
    "add", "sub", "mul", "neg", "scale", "add_scalar",
    "log", "exp", "tanh", "sigmoid", "leaky_relu", "softmax",
    "sum_all", "mean_all", "reshape", "concat", "crop", "pick",
    "fully_connected", "add_channel_bias", "conv2d", "deconv2d",
    "GRUParams", "gru_cell", "gru_param_init",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if check_finite_enabled() and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by op")
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"operand shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"operand dtypes differ: {a.data.dtype} vs {b.data.dtype}")


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: ((a, g), (b, g)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (kept out of the graph)."""
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: ((a, g * c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data + c, (a,), lambda g: ((a, g),))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, (a,), lambda g: ((a, g / a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def sigmoid(a: Tensor) -> Tensor:
    # exp of a non-positive argument on both branches, no overflow
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(a.data >= 0, a.data.dtype.type(1.0), a.data.dtype.type(alpha))
    return _make(a.data * slope, (a,), lambda g: ((a, g * slope),))


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax over a 1-d logits vector."""
    if logits.data.ndim != 1 or logits.data.size < 1:
        raise ShapeError("softmax expects a non-empty 1-d tensor")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    out = e / e.sum()

    def backward(g):
        dot = np.dot(g, out)
        return ((logits, out * (g - dot)),)

    return _make(out, (logits,), backward)


# -- reductions and shape surgery -----------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: ((a, np.broadcast_to(g, a.data.shape).copy()),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.dtype.type(a.data.size)
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: ((a, np.broadcast_to(g / n, a.data.shape).copy()),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.data.shape
    return _make(out, (a,), lambda g: ((a, g.reshape(orig)),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    dt = parts[0].data.dtype
    if any(p.data.dtype != dt for p in parts):
        raise ShapeError("concat dtype mismatch")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append((p, g[tuple(idx)]))
        return tuple(grads)

    return _make(out, tuple(parts), backward)


def crop(a: Tensor, starts, sizes) -> Tensor:
    """Slice a contiguous block; gradient scatters back into a zero field."""
    if len(starts) != a.data.ndim or len(sizes) != a.data.ndim:
        raise ShapeError("crop starts/sizes rank mismatch")
    idx = tuple(slice(s, s + n) for s, n in zip(starts, sizes))
    for sl, ext in zip(idx, a.data.shape):
        if sl.start < 0 or sl.stop > ext:
            raise ShapeError(f"crop window {idx} outside shape {a.data.shape}")
    out = a.data[idx].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _make(out, (a,), backward)


def pick(a: Tensor, index: int) -> Tensor:
    """Select one entry of a 1-d tensor as a scalar."""
    if a.data.ndim != 1:
        raise ShapeError("pick expects a 1-d tensor")
    index = int(index)
    out = np.asarray(a.data[index], dtype=a.data.dtype)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _make(out, (a,), backward)


# -- affine ----------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise ShapeError("fully_connected expects 1-d input and 2-d weight")
    if weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"fully_connected inner dims disagree: {weight.data.shape} @ {x.data.shape}")
    out = weight.data @ x.data
    parents = [x, weight]
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ShapeError("bias shape mismatch")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [(x, weight.data.T @ g), (weight, np.outer(g, x.data))]
        if bias is not None:
            grads.append((bias, g))
        return tuple(grads)

    return _make(out, tuple(parents), backward)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to a [C,H,W] map."""
    if x.data.ndim != 3 or bias.data.shape != (x.data.shape[0],):
        raise ShapeError("add_channel_bias expects [C,H,W] and [C]")
    out = x.data + bias.data[:, None, None]
    return _make(out, (x, bias), lambda g: ((x, g), (bias, g.sum(axis=(1, 2)))))


# -- convolution machinery -------------------------------------------------

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded input [C, Hp, Wp] -> [C*kh*kw, ho*wo]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s][:, :ho, :wo]           # [C, ho, wo, kh, kw]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def _conv_out_extent(h: int, k: int, s: int, p: int) -> int:
    return (h + 2 * p - k) // s + 1


def _conv_fwd(x: np.ndarray, k: np.ndarray, s: int, p: int) -> np.ndarray:
    co, ci, kh, kw = k.shape
    ho = _conv_out_extent(x.shape[1], kh, s, p)
    wo = _conv_out_extent(x.shape[2], kw, s, p)
    cols = _im2col(_pad2d(x, p), kh, kw, s, ho, wo)
    return (k.reshape(co, -1) @ cols).reshape(co, ho, wo)


def _conv_bwd_input(gy: np.ndarray, k: np.ndarray, s: int, p: int, in_hw) -> np.ndarray:
    # scatter-accumulate gemm result back through the im2col windows
    co, ci, kh, kw = k.shape
    h, w = in_hw
    ho, wo = gy.shape[1], gy.shape[2]
    gcols = (k.reshape(co, -1).T @ gy.reshape(co, -1)).reshape(ci, kh, kw, ho, wo)
    gx = np.zeros((ci, h + 2 * p, w + 2 * p), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
    if p:
        gx = gx[:, p:p + h, p:p + w]
    return np.ascontiguousarray(gx)


def _conv_bwd_kernel(x: np.ndarray, gy: np.ndarray, s: int, p: int, kh: int, kw: int) -> np.ndarray:
    co = gy.shape[0]
    ho, wo = gy.shape[1], gy.shape[2]
    cols = _im2col(_pad2d(x, p), kh, kw, s, ho, wo)
    gk = gy.reshape(co, -1) @ cols.T
    return gk.reshape(co, x.shape[0], kh, kw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a [C_in,H,W] map with a [C_out,C_in,kh,kw] kernel."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects [C,H,W] input and [O,I,kh,kw] kernel")
    co, ci, kh, kw = kernel.data.shape
    if ci != x.data.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape[0]}, kernel expects {ci}")
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError("conv2d dtype mismatch")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d stride must be >= 1 and pad >= 0")
    if x.data.shape[1] + 2 * pad < kh or x.data.shape[2] + 2 * pad < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    out = _conv_fwd(x.data, kernel.data, stride, pad)
    in_hw = (x.data.shape[1], x.data.shape[2])

    def backward(g):
        return (
            (x, _conv_bwd_input(g, kernel.data, stride, pad, in_hw)),
            (kernel, _conv_bwd_kernel(x.data, g, stride, pad, kh, kw)),
        )

    return _make(out, (x, kernel), backward)


def deconv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of conv2d as a forward op.

    Kernel layout is [C_in, C_out, kh, kw]; output extent is
    stride*(H-1) + kh - 2*pad.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("deconv2d expects [C,H,W] input and [I,O,kh,kw] kernel")
    ci, co, kh, kw = kernel.data.shape
    if ci != x.data.shape[0]:
        raise ShapeError(f"deconv2d channel mismatch: input {x.data.shape[0]}, kernel expects {ci}")
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError("deconv2d dtype mismatch")
    if stride not in (1, 2):
        raise ShapeError("deconv2d stride must be 1 or 2")
    oh = stride * (x.data.shape[1] - 1) + kh - 2 * pad
    ow = stride * (x.data.shape[2] - 1) + kw - 2 * pad
    if oh < 1 or ow < 1:
        raise ShapeError("deconv2d output extent would be empty")
    out = _conv_bwd_input(x.data, kernel.data, stride, pad, (oh, ow))

    def backward(g):
        return (
            (x, _conv_fwd(g, kernel.data, stride, pad)),
            (kernel, _conv_bwd_kernel(g, x.data, stride, pad, kh, kw)),
        )

    return _make(out, (x, kernel), backward)


# -- GRU cell ---------------------------------------------------------------

class GRUParams:
    """The nine parameter tensors of one GRU cell."""

    NAMES = ("w_r", "u_r", "b_r", "w_z", "u_z", "b_z", "w_n", "u_n", "b_n")

    def __init__(self, w_r, u_r, b_r, w_z, u_z, b_z, w_n, u_n, b_n):
        self.w_r, self.u_r, self.b_r = w_r, u_r, b_r
        self.w_z, self.u_z, self.b_z = w_z, u_z, b_z
        self.w_n, self.u_n, self.b_n = w_n, u_n, b_n

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.NAMES}

    @property
    def hidden(self) -> int:
        return self.w_r.data.shape[0]


def gru_param_init(rng: np.random.Generator, input_dim: int, hidden_dim: int, dtype) -> GRUParams:
    s = 1.0 / np.sqrt(hidden_dim)
    def w():
        return Tensor(rng.uniform(-s, s, (hidden_dim, input_dim)).astype(dtype), requires_grad=True)
    def u():
        return Tensor(rng.uniform(-s, s, (hidden_dim, hidden_dim)).astype(dtype), requires_grad=True)
    def b():
        return Tensor(np.zeros(hidden_dim, dtype=dtype), requires_grad=True)
    return GRUParams(w(), u(), b(), w(), u(), b(), w(), u(), b())


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    """One GRU step: h' = (1-z)*n + z*h with reset gate r applied to h."""
    r = sigmoid(add(add(fully_connected(x, p.w_r), fully_connected(h, p.u_r)), p.b_r))
    z = sigmoid(add(add(fully_connected(x, p.w_z), fully_connected(h, p.u_z)), p.b_z))
    n = tanh(add(add(fully_connected(x, p.w_n), fully_connected(mul(r, h), p.u_n)), p.b_n))
    return add(sub(n, mul(z, n)), mul(z, h))
