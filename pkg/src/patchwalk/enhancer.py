"""Local enhancement network.

The enhancer sees the whole scene at base resolution (target/4) as a 4-plane
stack: the box-masked current estimate, the current estimate, the original
corrupted image, and a learned global-context plane expanded from the policy
state.  An hourglass of convs and two stride-2 transposed convs emits a
residual field at full target resolution; paste_patch applies it inside the
attended box only.

Boxes are (top, left, height, width) tuples in 0-based target-resolution
pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor

__all__ = [
    "EnhancerConfig", "EnhancerNetwork", "decimate", "paste_patch",
    "TABLE_CHANNELS", "ENHANCER_FACTOR",
]

# layer widths of the shipped architecture (hourglass, final layer linear)
TABLE_CHANNELS = (64, 32, 32, 32, 8, 8, 1)

# the two stride-2 deconvs upscale the base grid by this fixed amount
ENHANCER_FACTOR = 4

_KERNELS = (5, 3, 3, 3, 3, 3, 5)
_DECONV_LAYERS = (2, 4)  # indices into the 7-layer stack


def decimate(plane: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-average downsample by an integral factor."""
    h, w = plane.shape
    if h % factor or w % factor:
        raise ValueError(f"extent {h}x{w} not divisible by {factor}")
    return plane.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def paste_patch(i_t: np.ndarray, residual: np.ndarray, box) -> np.ndarray:
    """Add the residual inside the box (clipped to [-1,1]); copy elsewhere."""
    top, left, h, w = box
    if residual.shape != i_t.shape:
        raise ValueError("residual extent must match the image")
    out = i_t.copy()
    sl = (slice(top, top + h), slice(left, left + w))
    out[sl] = np.clip(i_t[sl] + residual[sl], -1.0, 1.0)
    return out


@dataclass
class EnhancerConfig:
    base_h: int
    base_w: int
    state_dim: int
    channels: tuple = TABLE_CHANNELS

    def __post_init__(self):
        if len(self.channels) != 7:
            raise ValueError("enhancer stack has exactly 7 layers")
        if self.channels[-1] != 1:
            raise ValueError("final layer must emit one plane")


class EnhancerNetwork:
    def __init__(self, cfg: EnhancerConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        dt = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

        def par(name, arr):
            t = Tensor(np.ascontiguousarray(arr, dtype=dt), requires_grad=True)
            self._params[name] = t
            return t

        c_in = 4
        for i, (c_out, k) in enumerate(zip(cfg.channels, _KERNELS), start=1):
            fan_in = c_in * k * k
            s = np.sqrt(1.0 / fan_in)
            if i - 1 in _DECONV_LAYERS:
                w = rng.uniform(-s, s, (c_in, c_out, k, k))
            elif i == len(cfg.channels):
                w = np.zeros((c_out, c_in, k, k))  # residual starts at zero
            else:
                w = rng.uniform(-s, s, (c_out, c_in, k, k))
            par(f"enh.layer{i}.w", w)
            par(f"enh.layer{i}.b", np.zeros(c_out))
            c_in = c_out

        npix = cfg.base_h * cfg.base_w
        s = np.sqrt(1.0 / cfg.state_dim)
        par("enh.ctx.w", rng.uniform(-s, s, (npix, cfg.state_dim)))
        par("enh.ctx.b", np.zeros(npix))

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def p(self, name: str) -> Tensor:
        return self._params[name]

    # -- forward pieces ------------------------------------------------------

    def build_global_context(self, s: Tensor) -> Tensor:
        """Expand the state vector to a base-resolution plane (row-major).

        The squash keeps the plane on the same [-1, 1] footing as the image
        planes; the raw projection tracks the policy state, whose magnitude
        drifts during joint training, and an unbounded plane lets that drift
        destabilize the supervised learner.
        """
        flat = nd.fully_connected(s, self.p("enh.ctx.w"), self.p("enh.ctx.b"))
        return nd.tanh(nd.reshape(flat, (self.cfg.base_h, self.cfg.base_w)))

    def assemble_input(self, box, i_t: np.ndarray, i_0: np.ndarray,
                       i_g: Tensor) -> Tensor:
        """4-plane stack at base resolution.

        Planes from the target-resolution images are decimated by factor-4
        area averaging; the context plane arrives already base-sized.
        """
        top, left, h, w = box
        if h < 1 or w < 1:
            raise ValueError("degenerate box")
        masked = np.zeros_like(i_t)
        sl = (slice(top, top + h), slice(left, left + w))
        masked[sl] = i_t[sl]
        const = np.stack([decimate(masked), decimate(i_t), decimate(i_0)])
        if i_g.data.shape != (self.cfg.base_h, self.cfg.base_w):
            raise nd.ShapeError("context plane extent mismatch")
        return nd.concat([Tensor(const.astype(self.dtype, copy=False)),
                          nd.reshape(i_g, (1, self.cfg.base_h, self.cfg.base_w))],
                         axis=0)

    def enhance_patch(self, stack: Tensor) -> Tensor:
        """Run the hourglass; returns the full-resolution residual plane.

        Stride-1 layers keep extent via pad k//2; each stride-2 transposed
        layer emits 2H+1 rows/cols and the trailing one is trimmed, so the
        output is exactly 4x base.
        """
        h = stack
        n = len(self.cfg.channels)
        for i, k in enumerate(_KERNELS, start=1):
            w = self.p(f"enh.layer{i}.w")
            if i - 1 in _DECONV_LAYERS:
                h = nd.deconv2d(h, w, stride=2, pad=0)
                c, hh, ww = h.data.shape
                h = nd.crop(h, (0, 0, 0), (c, hh - 1, ww - 1))
            else:
                h = nd.conv2d(h, w, stride=1, pad=(k - 1) // 2)
            h = nd.add_channel_bias(h, self.p(f"enh.layer{i}.b"))
            if i < n:
                h = nd.leaky_relu(h, 0.2)
        return nd.reshape(h, (h.data.shape[1], h.data.shape[2]))

    # -- episode-facing composition -------------------------------------------

    def patch_loss(self, residual: Tensor, i_t: np.ndarray, i_hr: np.ndarray,
                   box) -> Tensor:
        """Mean squared error over box pixels of the unclipped prediction."""
        top, left, h, w = box
        r_box = nd.crop(residual, (top, left), (h, w))
        sl = (slice(top, top + h), slice(left, left + w))
        pred = nd.add(r_box, Tensor(i_t[sl].astype(self.dtype, copy=False)))
        diff = nd.sub(pred, Tensor(i_hr[sl].astype(self.dtype, copy=False)))
        return nd.mean_all(nd.mul(diff, diff))

    def enhance_step(self, i_t: np.ndarray, i_0: np.ndarray, s: Tensor, box,
                     i_hr: np.ndarray | None = None):
        """One enhancement: returns (next image, loss graph or None).

        ``s`` should be detached from the policy graph by the caller; the
        supervised loss trains only enhancer parameters.
        """
        ctx = self.build_global_context(s)
        stack = self.assemble_input(box, i_t, i_0, ctx)
        residual = self.enhance_patch(stack)
        i_next = paste_patch(i_t, np.asarray(residual.data, dtype=np.float64), box)
        loss = None
        if i_hr is not None:
            loss = self.patch_loss(residual, i_t, i_hr, box)
        return i_next, loss
