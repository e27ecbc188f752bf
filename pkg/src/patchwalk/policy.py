"""Recurrent patch-selection policy.

State encoding: a shared 4-layer conv feature extractor embeds the current
image and the original corrupted image into 64-d vectors; past actions are
folded through a small dedicated GRU.  The concatenated state drives the core
GRU whose hidden vector feeds four categorical heads: x-grid position, y-grid
position, aspect-ratio id, scale id.  Box extents derive from (ratio, scale)
around the base size Z, so the same head layout serves any image geometry.

Actions already taken in an episode are masked out of the joint distribution
(exact-tuple repeats get probability zero; the remainder is renormalized).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor

__all__ = [
    "RATIO_SET", "SCALE_SET", "PolicyConfig", "Action", "ActionDistribution",
    "PolicyNetwork", "MaskedActionError", "decode_box", "grid_centers",
]

RATIO_SET = ((3, 2), (1, 1), (2, 3))
# capped at 1.0 so the widest decode (ratio 2:3) is 1.5*Z*s^2 <= 1.5*Z and a
# 64-px desk image with Z=32 never clamps a box to a degenerate full-width strip
SCALE_SET = (0.6, 0.8, 1.0)


class MaskedActionError(ValueError):
    """Log-probability requested for an action with zero probability."""


def decode_box(ratio_id: int, scale_id: int, z_base: int,
               ratio_set=RATIO_SET, scale_set=SCALE_SET,
               max_h: int | None = None, max_w: int | None = None) -> tuple[int, int]:
    """Box extents from (ratio, scale) ids around base size Z.

    L_h = Z * s, L_w = (L_h / ratio) * s, rounded half-up, clamped to at
    least 1 and optionally to the image extents.
    """
    rh, rw = ratio_set[ratio_id]
    s = float(scale_set[scale_id])
    lh = z_base * s
    lw = (lh / (rh / rw)) * s
    lh = max(1, int(np.floor(lh + 0.5)))
    lw = max(1, int(np.floor(lw + 0.5)))
    if max_h is not None:
        lh = min(lh, max_h)
    if max_w is not None:
        lw = min(lw, max_w)
    return lh, lw


def grid_centers(extent: int, stride: int) -> np.ndarray:
    """1-based candidate center coordinates on a stride-g grid."""
    off = (stride + 1) // 2
    n = (extent - off) // stride + 1
    return off + stride * np.arange(n)


@dataclass(frozen=True)
class Action:
    x: int           # 1-based center column
    y: int           # 1-based center row
    ratio_id: int
    scale_id: int
    box_h: int
    box_w: int
    xi: int = field(default=-1, compare=False)  # grid indices of (x, y)
    yi: int = field(default=-1, compare=False)

    def key(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.ratio_id, self.scale_id)


@dataclass
class PolicyConfig:
    image_h: int
    image_w: int
    z_base: int
    grid_stride: int = 8
    input_extent: int = 32
    feature_channels: tuple = (8, 8, 16, 32)
    feature_dim: int = 64
    history_hidden: int = 64
    gru_hidden: int = 128
    ratio_set: tuple = RATIO_SET
    scale_set: tuple = SCALE_SET

    def __post_init__(self):
        if self.input_extent % 16:
            raise ValueError("policy input extent must be divisible by 16")
        if len(self.feature_channels) != 4:
            raise ValueError("feature extractor has exactly 4 conv layers")

    @property
    def state_dim(self) -> int:
        return 2 * self.feature_dim + self.history_hidden


class ActionDistribution:
    """Factored categorical distribution with exact-tuple duplicate masking.

    ``heads`` hold the differentiable per-component probability vectors; the
    dense joint (numpy, outer product of heads with forbidden tuples zeroed
    and renormalized) backs sampling and argmax queries.
    """

    HEAD_ORDER = ("x", "y", "ratio", "scale")

    def __init__(self, heads: dict[str, Tensor], cfg: PolicyConfig,
                 forbidden: frozenset):
        self.heads = heads
        self.cfg = cfg
        self.forbidden = forbidden
        self.x_centers = grid_centers(cfg.image_w, cfg.grid_stride)
        self.y_centers = grid_centers(cfg.image_h, cfg.grid_stride)
        self._joint = None

    # -- index helpers -----------------------------------------------------

    def _ids_of_key(self, key) -> tuple[int, int, int, int]:
        x, y, rid, sid = key
        xi = int(np.searchsorted(self.x_centers, x))
        yi = int(np.searchsorted(self.y_centers, y))
        if xi >= len(self.x_centers) or self.x_centers[xi] != x:
            raise MaskedActionError(f"x={x} is not a grid center")
        if yi >= len(self.y_centers) or self.y_centers[yi] != y:
            raise MaskedActionError(f"y={y} is not a grid center")
        return xi, yi, rid, sid

    def _make_action(self, xi: int, yi: int, rid: int, sid: int) -> Action:
        bh, bw = decode_box(rid, sid, self.cfg.z_base, self.cfg.ratio_set,
                            self.cfg.scale_set, max_h=self.cfg.image_h,
                            max_w=self.cfg.image_w)
        return Action(x=int(self.x_centers[xi]), y=int(self.y_centers[yi]),
                      ratio_id=rid, scale_id=sid, box_h=bh, box_w=bw,
                      xi=xi, yi=yi)

    # -- dense joint ---------------------------------------------------------

    def joint(self) -> np.ndarray:
        """[Gx,Gy,R,S] probabilities after masking and renormalization."""
        if self._joint is None:
            px = self.heads["x"].data
            py = self.heads["y"].data
            pr = self.heads["ratio"].data
            ps = self.heads["scale"].data
            j = np.einsum("a,b,c,d->abcd", px, py, pr, ps)
            for key in self.forbidden:
                j[self._ids_of_key(key)] = 0.0
            total = j.sum()
            if total <= 0.0:
                raise MaskedActionError("every action is masked")
            self._joint = j / total
        return self._joint

    def joint_prob(self, action: Action) -> float:
        if action.key() in self.forbidden:
            return 0.0
        ids = self._ids_of_key(action.key())
        return float(self.joint()[ids])

    # -- queries -------------------------------------------------------------

    def sample(self, rng: np.random.Generator) -> Action:
        return self.sample_many(rng, 1)[0]

    def sample_many(self, rng: np.random.Generator, n: int) -> list[Action]:
        j = self.joint()
        flat = rng.choice(j.size, size=n, p=j.ravel())
        out = []
        for f in flat:
            xi, yi, rid, sid = np.unravel_index(int(f), j.shape)
            out.append(self._make_action(int(xi), int(yi), int(rid), int(sid)))
        return out

    def greedy(self) -> Action:
        """Per-head argmax; falls back to the joint argmax when masked."""
        ids = tuple(int(np.argmax(self.heads[h].data)) for h in self.HEAD_ORDER)
        cand = self._make_action(*ids)
        if cand.key() not in self.forbidden:
            return cand
        j = self.joint()
        xi, yi, rid, sid = np.unravel_index(int(np.argmax(j)), j.shape)
        return self._make_action(int(xi), int(yi), int(rid), int(sid))

    def log_prob(self, action: Action) -> Tensor:
        """Differentiable log joint probability of an unmasked action."""
        key = action.key()
        if key in self.forbidden:
            raise MaskedActionError(f"action {key} is masked")
        xi, yi, rid, sid = self._ids_of_key(key)
        lp = nd.add(nd.add(nd.log(nd.pick(self.heads["x"], xi)),
                           nd.log(nd.pick(self.heads["y"], yi))),
                    nd.add(nd.log(nd.pick(self.heads["ratio"], rid)),
                           nd.log(nd.pick(self.heads["scale"], sid))))
        if self.forbidden:
            # renormalization constant 1 - sum of masked factored masses
            masked = None
            for fkey in sorted(self.forbidden):
                fxi, fyi, frid, fsid = self._ids_of_key(fkey)
                term = nd.mul(nd.mul(nd.pick(self.heads["x"], fxi),
                                     nd.pick(self.heads["y"], fyi)),
                              nd.mul(nd.pick(self.heads["ratio"], frid),
                                     nd.pick(self.heads["scale"], fsid)))
                masked = term if masked is None else nd.add(masked, term)
            z = nd.add_scalar(nd.neg(masked), 1.0)
            lp = nd.sub(lp, nd.log(z))
        return lp


class PolicyNetwork:
    """Feature extractor + history GRU + core GRU + four categorical heads."""

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self._params: dict[str, Tensor] = {}
        dt = np.dtype(dtype)

        def par(name, arr):
            t = Tensor(np.ascontiguousarray(arr, dtype=dt), requires_grad=True)
            self._params[name] = t
            return t

        def conv_init(co, ci, k):
            s = np.sqrt(1.0 / (ci * k * k))
            return rng.uniform(-s, s, (co, ci, k, k))

        def fc_init(m, n):
            s = np.sqrt(1.0 / n)
            return rng.uniform(-s, s, (m, n))

        chans = cfg.feature_channels
        kernels = (5, 3, 3, 3)
        c_in = 1
        for i, (c_out, k) in enumerate(zip(chans, kernels), start=1):
            par(f"feat.conv{i}.w", conv_init(c_out, c_in, k))
            par(f"feat.conv{i}.b", np.zeros(c_out))
            c_in = c_out
        spatial = cfg.input_extent // 16
        self._fc_in = chans[-1] * spatial * spatial
        par("feat.fc.w", fc_init(cfg.feature_dim, self._fc_in))
        par("feat.fc.b", np.zeros(cfg.feature_dim))

        par("hist.lift.w", fc_init(cfg.history_hidden, 4))
        par("hist.lift.b", np.zeros(cfg.history_hidden))
        self.hist_gru = self._init_gru("hist.gru", rng, cfg.history_hidden,
                                       cfg.history_hidden, dt)
        self.core_gru = self._init_gru("core.gru", rng, cfg.state_dim,
                                       cfg.gru_hidden, dt)

        head_sizes = {
            "x": len(grid_centers(cfg.image_w, cfg.grid_stride)),
            "y": len(grid_centers(cfg.image_h, cfg.grid_stride)),
            "ratio": len(cfg.ratio_set),
            "scale": len(cfg.scale_set),
        }
        # small random head weights keep sampling near uniform early while the
        # argmax already tracks content and history; zero weights would pin the
        # greedy rollout to one static cell for many updates
        for name, size in head_sizes.items():
            par(f"head.{name}.w", fc_init(size, cfg.gru_hidden))
            par(f"head.{name}.b", np.zeros(size))
        self.head_sizes = head_sizes

    def _init_gru(self, prefix, rng, input_dim, hidden_dim, dt) -> nd.GRUParams:
        p = nd.gru_param_init(rng, input_dim, hidden_dim, dt)
        for name, t in p.tensors().items():
            self._params[f"{prefix}.{name}"] = t
        return p

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def p(self, name: str) -> Tensor:
        return self._params[name]

    # -- forward pieces ------------------------------------------------------

    def extract_features(self, img: np.ndarray) -> Tensor:
        """64-d embedding of a plane already resized to the input extent."""
        e = self.cfg.input_extent
        if img.shape != (e, e):
            raise nd.ShapeError(f"feature input must be {e}x{e}, got {img.shape}")
        h = Tensor(np.ascontiguousarray(img[None], dtype=self.dtype))
        kernels = (5, 3, 3, 3)
        for i, k in enumerate(kernels, start=1):
            h = nd.conv2d(h, self.p(f"feat.conv{i}.w"), stride=2, pad=(k - 1) // 2)
            h = nd.add_channel_bias(h, self.p(f"feat.conv{i}.b"))
            h = nd.leaky_relu(h, 0.2)
        flat = nd.reshape(h, (self._fc_in,))
        return nd.fully_connected(flat, self.p("feat.fc.w"), self.p("feat.fc.b"))

    def encode_history(self, actions) -> Tensor:
        """Fold past actions through the history GRU; empty history is zeros."""
        cfg = self.cfg
        h = Tensor(np.zeros(cfg.history_hidden, dtype=self.dtype))
        nr, ns = len(cfg.ratio_set), len(cfg.scale_set)
        for a in actions:
            vec = np.array([
                a.x / cfg.image_w,
                a.y / cfg.image_h,
                a.ratio_id / (nr - 1) if nr > 1 else 0.0,
                a.scale_id / (ns - 1) if ns > 1 else 0.0,
            ], dtype=self.dtype)
            lift = nd.fully_connected(Tensor(vec), self.p("hist.lift.w"),
                                      self.p("hist.lift.b"))
            h = nd.gru_cell(lift, h, self.hist_gru)
        return h

    def encode_state(self, v_t: Tensor, v_0: Tensor, v_l: Tensor) -> Tensor:
        return nd.concat([v_t, v_0, v_l], axis=0)

    def step_policy(self, s: Tensor, gru_hidden: Tensor | None,
                    forbidden=frozenset()) -> tuple[ActionDistribution, Tensor]:
        """Advance the core GRU and emit the masked action distribution."""
        if gru_hidden is None:
            gru_hidden = Tensor(np.zeros(self.cfg.gru_hidden, dtype=self.dtype))
        h = nd.gru_cell(s, gru_hidden, self.core_gru)
        heads = {}
        for name in ActionDistribution.HEAD_ORDER:
            logits = nd.fully_connected(h, self.p(f"head.{name}.w"),
                                        self.p(f"head.{name}.b"))
            heads[name] = nd.softmax(logits)
        dist = ActionDistribution(heads, self.cfg, frozenset(forbidden))
        return dist, h
