"""The restoration MDP: rollout loop, cropping, coverage, terminal reward.

An episode starts from the bicubic upscale of the LR input and runs T steps.
Each step encodes the state, asks an action source for a box, enhances the
boxed region, and marks it in the coverage mask.  The single reward arrives
at the terminal step: PSNR gain over a reference restorer plus a coverage
bonus.

Action sources share one interface so the learned policy and the ablation
baselines (random, raster, fixed box) drive the identical environment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .ndcore import Tensor
from .policy import (Action, ActionDistribution, MaskedActionError,
                     PolicyNetwork, decode_box, grid_centers)

__all__ = [
    "Box", "box_from_action", "crop", "update_coverage", "coverage_fraction",
    "compute_reward", "ReferenceRestorer", "OracleEnhancer", "action_regions",
    "ActionSource", "PolicySource", "RandomSource", "RasterSource",
    "FixedBoxSource", "baseline_policy", "EpisodeRollout", "EpisodeTrajectory",
    "StepRecord", "run_episode", "write_trajectory_csv",
]


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    h: int
    w: int

    def as_tuple(self):
        return (self.top, self.left, self.h, self.w)

    def slices(self):
        return (slice(self.top, self.top + self.h),
                slice(self.left, self.left + self.w))


def box_from_action(action: Action, img_h: int, img_w: int) -> Box:
    """Clamp rule: shrink the box to the image if oversized, else keep the
    extent and shift it inward so it fits."""
    bh = min(action.box_h, img_h)
    bw = min(action.box_w, img_w)
    top = min(max(action.y - 1 - (bh - 1) // 2, 0), img_h - bh)
    left = min(max(action.x - 1 - (bw - 1) // 2, 0), img_w - bw)
    return Box(top, left, bh, bw)


_REGION_CACHE: dict = {}


def action_regions(cfg):
    """(key -> rectangle, rectangle -> key class) over the whole action grid.

    Clamping and inward shifting can collapse distinct (x, y, ratio, scale)
    tuples onto one placed rectangle near the borders.  Masking the whole
    class after a selection is what makes "no duplicated region" hold rather
    than merely "no duplicated tuple"."""
    gk = (cfg.image_h, cfg.image_w, cfg.z_base, cfg.grid_stride,
          tuple(cfg.ratio_set), tuple(cfg.scale_set))
    hit = _REGION_CACHE.get(gk)
    if hit is not None:
        return hit
    xs = grid_centers(cfg.image_w, cfg.grid_stride)
    ys = grid_centers(cfg.image_h, cfg.grid_stride)
    rect_of: dict = {}
    classes: dict = {}
    for rid in range(len(cfg.ratio_set)):
        for sid in range(len(cfg.scale_set)):
            bh, bw = decode_box(rid, sid, cfg.z_base, cfg.ratio_set,
                                cfg.scale_set, max_h=cfg.image_h,
                                max_w=cfg.image_w)
            for x in xs:
                for y in ys:
                    a = Action(x=int(x), y=int(y), ratio_id=rid, scale_id=sid,
                               box_h=bh, box_w=bw)
                    rect = box_from_action(a, cfg.image_h, cfg.image_w).as_tuple()
                    rect_of[a.key()] = rect
                    classes.setdefault(rect, []).append(a.key())
    out = (rect_of, {r: tuple(ks) for r, ks in classes.items()})
    _REGION_CACHE[gk] = out
    return out


def crop(box: Box, img: np.ndarray) -> np.ndarray:
    return img[box.slices()]


def update_coverage(mask: np.ndarray, box: Box) -> np.ndarray:
    """Set the box footprint to 1 in place; idempotent."""
    mask[box.slices()] = 1
    return mask


def coverage_fraction(mask: np.ndarray) -> float:
    return int(mask.sum()) / mask.size


def compute_reward(i_t: np.ndarray, i_gt: np.ndarray, i_ref: np.ndarray,
                   mask: np.ndarray, lam: float) -> float:
    """PSNR gain over the reference restorer plus the coverage bonus."""
    return (imaging.psnr(i_t, i_gt) - imaging.psnr(i_ref, i_gt)
            + lam * coverage_fraction(mask))


class ReferenceRestorer:
    """Pluggable reference whose output anchors the reward scale.

    kinds: "bicubic" (default), "self" (reference := the episode's own final
    image, a diagnostic that zeroes the PSNR term), "single_pass" (one
    whole-image pass of a provided enhancer over the bicubic upscale).
    """

    def __init__(self, kind: str = "bicubic", enhancer=None, state_dim: int = 0):
        if kind not in ("bicubic", "self", "single_pass"):
            raise ValueError(f"unknown reference restorer kind {kind!r}")
        if kind == "single_pass" and enhancer is None:
            raise ValueError("single_pass reference needs an enhancer")
        self.kind = kind
        self.enhancer = enhancer
        self.state_dim = state_dim

    def restore(self, i_lr: np.ndarray, target_hw) -> np.ndarray:
        h, w = target_hw
        up = imaging.bicubic_resize(i_lr, h, w)
        if self.kind == "single_pass":
            s = Tensor(np.zeros(self.state_dim, dtype=self.enhancer.dtype))
            out, _ = self.enhancer.enhance_step(up, up, s, (0, 0, h, w))
            return out
        return up


class OracleEnhancer:
    """Test double that pastes the ground-truth patch into the box."""

    def __init__(self, i_hr: np.ndarray):
        self.i_hr = i_hr

    def enhance_step(self, i_t, i_0, s, box, i_hr=None):
        top, left, h, w = box
        out = i_t.copy()
        sl = (slice(top, top + h), slice(left, left + w))
        out[sl] = self.i_hr[sl]
        return out, None


# -- action sources -----------------------------------------------------------

class ActionSource:
    """Maps the per-step distribution to an action and its log-probability."""

    def select(self, dist: ActionDistribution, rng, mode: str, step: int):
        raise NotImplementedError


class PolicySource(ActionSource):
    def select(self, dist, rng, mode, step):
        action = dist.greedy() if mode == "greedy" else dist.sample(rng)
        return action, dist.log_prob(action)


class RandomSource(ActionSource):
    """Uniform over all currently unmasked action tuples."""

    def select(self, dist, rng, mode, step):
        j = dist.joint()
        flat = np.ones(j.size)
        for key in dist.forbidden:
            xi, yi, rid, sid = dist._ids_of_key(key)
            flat[np.ravel_multi_index((xi, yi, rid, sid), j.shape)] = 0.0
        n = flat.sum()
        idx = int(rng.choice(j.size, p=flat / n))
        xi, yi, rid, sid = np.unravel_index(idx, j.shape)
        action = dist._make_action(int(xi), int(yi), int(rid), int(sid))
        return action, float(-np.log(n))


class RasterSource(ActionSource):
    """Left-to-right, top-to-bottom tiles of the base box, wrapping at the end."""

    def __init__(self, img_h: int, img_w: int, z_base: int,
                 ratio_set, scale_set):
        from .policy import decode_box
        rid = _index_of(ratio_set, (1, 1), "ratio 1:1")
        sid = _index_of(scale_set, 1.0, "scale 1.0")
        bh, bw = decode_box(rid, sid, z_base, ratio_set, scale_set,
                            max_h=img_h, max_w=img_w)
        self.actions = []
        tops = [min(r, img_h - bh) for r in range(0, img_h, bh)]
        lefts = [min(c, img_w - bw) for c in range(0, img_w, bw)]
        for top in tops:
            for left in lefts:
                self.actions.append(Action(
                    x=left + (bw - 1) // 2 + 1, y=top + (bh - 1) // 2 + 1,
                    ratio_id=rid, scale_id=sid, box_h=bh, box_w=bw))

    def select(self, dist, rng, mode, step):
        return self.actions[step % len(self.actions)], 0.0


class FixedBoxSource(ActionSource):
    """Learned positions with ratio and scale pinned to (1:1, 1.0)."""

    def __init__(self, ratio_set, scale_set):
        self.rid = _index_of(ratio_set, (1, 1), "ratio 1:1")
        self.sid = _index_of(scale_set, 1.0, "scale 1.0")

    def select(self, dist, rng, mode, step):
        px = dist.heads["x"].data
        py = dist.heads["y"].data
        pxy = np.outer(px, py)
        for key in dist.forbidden:
            x, y, rid, sid = key
            if rid == self.rid and sid == self.sid:
                xi, yi, _, _ = dist._ids_of_key(key)
                pxy[xi, yi] = 0.0
        total = pxy.sum()
        if total <= 0:
            raise MaskedActionError("all pinned-box positions are masked")
        pxy = pxy / total
        if mode == "greedy":
            flat = int(np.argmax(pxy))
        else:
            flat = int(rng.choice(pxy.size, p=pxy.ravel()))
        xi, yi = np.unravel_index(flat, pxy.shape)
        action = dist._make_action(int(xi), int(yi), self.rid, self.sid)
        return action, float(np.log(pxy[xi, yi]))


def _index_of(table, value, what):
    for i, v in enumerate(table):
        if v == value:
            return i
    raise ValueError(f"{what} missing from configured table {table}")


def baseline_policy(kind: str, img_h: int, img_w: int, z_base: int,
                    ratio_set, scale_set) -> ActionSource:
    if kind == "random":
        return RandomSource()
    if kind == "raster":
        return RasterSource(img_h, img_w, z_base, ratio_set, scale_set)
    if kind == "fixed_box":
        return FixedBoxSource(ratio_set, scale_set)
    raise ValueError(f"unknown baseline kind {kind!r}")


# -- rollout --------------------------------------------------------------------

@dataclass
class StepRecord:
    action: Action
    log_prob: object           # Tensor for the learned policy, float otherwise
    step_loss: float | None

    def log_prob_value(self) -> float:
        lp = self.log_prob
        return float(lp.data) if isinstance(lp, Tensor) else float(lp)


@dataclass
class EpisodeTrajectory:
    steps: list = field(default_factory=list)
    i_0: np.ndarray | None = None
    i_t: np.ndarray | None = None
    mask: np.ndarray | None = None
    reward: float | None = None
    psnr_t: float | None = None
    ssim_t: float | None = None

    @property
    def coverage(self) -> float:
        return coverage_fraction(self.mask)


class EpisodeRollout:
    """Stepwise rollout so training can interleave updates between steps."""

    def __init__(self, i_lr: np.ndarray, policy: PolicyNetwork, enhancer,
                 t_steps: int, rng=None, mode: str = "sample",
                 i_hr: np.ndarray | None = None, source: ActionSource | None = None):
        cfg = policy.cfg
        self.policy = policy
        self.enhancer = enhancer
        self.t_steps = int(t_steps)
        self.rng = rng
        self.mode = mode
        self.i_hr = i_hr
        self.source = source if source is not None else PolicySource()
        self.i_lr = np.asarray(i_lr, dtype=np.float64)
        self.i_0 = imaging.bicubic_resize(self.i_lr, cfg.image_h, cfg.image_w)
        self.i_t = self.i_0
        self.mask = np.zeros((cfg.image_h, cfg.image_w), dtype=np.uint8)
        self._rect_of, self._region_class = action_regions(cfg)
        self.forbidden: set = set()
        self.actions: list[Action] = []
        self.traj = EpisodeTrajectory(i_0=self.i_0, mask=self.mask)
        self.h_gru: Tensor | None = None
        self.v_0: Tensor | None = None
        self.last_loss: Tensor | None = None
        self.t = 0

    def _policy_view(self, img: np.ndarray) -> np.ndarray:
        e = self.policy.cfg.input_extent
        return imaging.bicubic_resize(img, e, e)

    def step(self):
        """Advance one step; returns the StepRecord (loss graph still attached)."""
        if self.t >= self.t_steps:
            raise RuntimeError("episode already terminal")
        if self.v_0 is None:
            self.v_0 = self.policy.extract_features(self._policy_view(self.i_0))
        cfg = self.policy.cfg
        v_t = self.policy.extract_features(self._policy_view(self.i_t))
        v_l = self.policy.encode_history(self.actions)
        s_t = self.policy.encode_state(v_t, self.v_0, v_l)
        dist, self.h_gru = self.policy.step_policy(s_t, self.h_gru, self.forbidden)
        action, log_prob = self.source.select(dist, self.rng, self.mode, self.t)
        box = box_from_action(action, cfg.image_h, cfg.image_w)
        i_next, loss = self.enhancer.enhance_step(
            self.i_t, self.i_0, s_t.detach(), box.as_tuple(), self.i_hr)
        update_coverage(self.mask, box)
        rect = self._rect_of.get(action.key())
        if rect is not None:
            self.forbidden.update(self._region_class[rect])
        # off-grid actions (raster tiles) never appear in the distribution,
        # so they contribute nothing to the mask
        self.actions.append(action)
        self.i_t = i_next
        self.t += 1
        rec = StepRecord(action=action, log_prob=log_prob,
                         step_loss=float(loss.data) if loss is not None else None)
        self.traj.steps.append(rec)
        self.last_loss = loss
        return rec

    @property
    def done(self) -> bool:
        return self.t >= self.t_steps

    def finish(self, reference: ReferenceRestorer | None = None,
               lam: float = 1.0) -> EpisodeTrajectory:
        """Fill in the terminal fields (reward only when ground truth exists)."""
        if not self.done:
            raise RuntimeError("episode still running; reward is terminal only")
        t = self.traj
        t.i_t = self.i_t
        if self.i_hr is not None:
            t.psnr_t = imaging.psnr(self.i_t, self.i_hr)
            t.ssim_t = imaging.ssim(self.i_t, self.i_hr)
            if reference is not None:
                if reference.kind == "self":
                    i_ref = self.i_t
                else:
                    i_ref = reference.restore(self.i_lr, self.i_t.shape)
                t.reward = compute_reward(self.i_t, self.i_hr, i_ref,
                                          self.mask, lam)
        return t


def run_episode(i_lr, policy, enhancer, t_steps, mode="sample", rng=None,
                i_hr=None, source=None, reference=None, lam=1.0) -> EpisodeTrajectory:
    roll = EpisodeRollout(i_lr, policy, enhancer, t_steps, rng=rng, mode=mode,
                          i_hr=i_hr, source=source)
    while not roll.done:
        roll.step()
    return roll.finish(reference=reference, lam=lam)


def write_trajectory_csv(path, traj: EpisodeTrajectory) -> None:
    def fmt(v):
        return "nan" if v is None else repr(float(v))

    lines = ["t,x,y,ratio_id,scale_id,Lh,Lw,logprob,step_loss"]
    for t, rec in enumerate(traj.steps, start=1):
        a = rec.action
        lines.append(f"{t},{a.x},{a.y},{a.ratio_id},{a.scale_id},"
                     f"{a.box_h},{a.box_w},{rec.log_prob_value()!r},{fmt(rec.step_loss)}")
    lines.append("reward,psnr,ssim,coverage")
    lines.append(f"{fmt(traj.reward)},{fmt(traj.psnr_t)},{fmt(traj.ssim_t)},"
                 f"{traj.coverage!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
