"""Brute-force oracles for tests and the verify subcommand.

Everything here runs at 64-bit and defines ground truth: exact policy-gradient
enumeration over a tiny MDP, a grouped Monte-Carlo REINFORCE estimator that is
distributionally identical to naive per-episode averaging, and exhaustive
coverage search over tiny box sets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .episode import (Box, EpisodeRollout, OracleEnhancer, ActionSource,
                      action_regions, compute_reward, coverage_fraction,
                      update_coverage)
from .policy import PolicyConfig, PolicyNetwork, grid_centers

__all__ = [
    "TinyMDP", "make_tiny_mdp", "make_bandit", "ReplaySource",
    "exact_policy_gradient", "mc_policy_gradient", "total_probability",
    "mean_reward", "flatten_grads", "bandit_gradient_variance",
    "optimal_coverage_bruteforce", "greedy_coverage",
]

SEQUENCE_CAP = 10_000
COVERAGE_CAP = 1_000_000


class ReplaySource(ActionSource):
    """Feeds a prescribed id-tuple sequence through the live distribution."""

    def __init__(self, ids):
        self.ids = list(ids)
        self.probs: list[float] = []

    def select(self, dist, rng, mode, step):
        action = dist._make_action(*self.ids[step])
        self.probs.append(dist.joint_prob(action))
        return action, dist.log_prob(action)


@dataclass
class TinyMDP:
    policy: PolicyNetwork
    enhancer: object
    i_lr: np.ndarray
    i_hr: np.ndarray
    i_ref: np.ndarray
    t_steps: int
    lam: float = 1.0
    reward_fn: object = None  # callable(EpisodeRollout) -> float; None = env reward

    def action_ids(self):
        cfg = self.policy.cfg
        sizes = self.policy.head_sizes
        return [(xi, yi, rid, sid)
                for xi in range(sizes["x"]) for yi in range(sizes["y"])
                for rid in range(len(cfg.ratio_set))
                for sid in range(len(cfg.scale_set))]

    def _id_rects(self):
        """Placed rectangle behind each id tuple (the masking identity)."""
        cfg = self.policy.cfg
        xs = grid_centers(cfg.image_w, cfg.grid_stride)
        ys = grid_centers(cfg.image_h, cfg.grid_stride)
        rect_of, _ = action_regions(cfg)
        return [rect_of[(int(xs[xi]), int(ys[yi]), rid, sid)]
                for xi, yi, rid, sid in self.action_ids()]

    def sequence_count(self) -> int:
        # ordered T-selections of distinct regions: T! * e_T(class sizes)
        sizes: dict = {}
        for rect in self._id_rects():
            sizes[rect] = sizes.get(rect, 0) + 1
        coeff = [1]
        for c in sizes.values():
            nxt = coeff + [0]
            for k in range(len(coeff), 0, -1):
                nxt[k] += c * coeff[k - 1]
            coeff = nxt
        if self.t_steps >= len(coeff):
            return 0
        return coeff[self.t_steps] * math.factorial(self.t_steps)

    def sequences(self):
        """All id sequences legal under region masking, in lexical order."""
        ids = self.action_ids()
        rects = self._id_rects()

        def rec(used, depth):
            if depth == self.t_steps:
                yield ()
                return
            for i, id4 in enumerate(ids):
                if rects[i] in used:
                    continue
                for rest in rec(used | {rects[i]}, depth + 1):
                    yield (id4,) + rest

        return rec(frozenset(), 0)

    def rollout(self, seq):
        """Replay one action sequence; returns (logprob graphs, P, reward)."""
        src = ReplaySource(seq)
        roll = EpisodeRollout(self.i_lr, self.policy, self.enhancer,
                              self.t_steps, rng=None, mode="replay",
                              i_hr=self.i_hr, source=src)
        while not roll.done:
            roll.step()
        p = float(np.prod(src.probs))
        if self.reward_fn is not None:
            r = float(self.reward_fn(roll))
        else:
            r = compute_reward(roll.i_t, self.i_hr, self.i_ref, roll.mask,
                               self.lam)
        graphs = [rec.log_prob for rec in roll.traj.steps]
        return graphs, p, r


def _check_cap(mdp: TinyMDP):
    n = mdp.sequence_count()
    if n > SEQUENCE_CAP:
        raise ValueError(f"instance too large: {n} sequences exceeds cap {SEQUENCE_CAP}")


def _grad_snapshot(policy: PolicyNetwork) -> dict[str, np.ndarray]:
    out = {}
    for name, p in policy.params().items():
        out[name] = (np.array(p.grad, copy=True) if p.grad is not None
                     else np.zeros_like(p.data))
    return out


def _zero_grads(policy: PolicyNetwork):
    for p in policy.params().values():
        p.grad = None


def exact_policy_gradient(mdp: TinyMDP, b: float = 0.0) -> dict[str, np.ndarray]:
    """grad of E[(r - b) * sum_t log pi] by exact summation over all sequences."""
    _check_cap(mdp)
    _zero_grads(mdp.policy)
    for seq in mdp.sequences():
        graphs, p, r = mdp.rollout(seq)
        w = p * (r - b)
        for lp in graphs:
            lp.backward(seed=w)
    grads = _grad_snapshot(mdp.policy)
    _zero_grads(mdp.policy)
    return grads


def total_probability(mdp: TinyMDP) -> float:
    """Sum of sequence probabilities; 1 up to roundoff when enumeration is sound."""
    _check_cap(mdp)
    total = 0.0
    for seq in mdp.sequences():
        _, p, _ = mdp.rollout(seq)
        total += p
    return total


def mean_reward(mdp: TinyMDP) -> float:
    """Expected terminal reward under the policy, by exact summation.

    The natural centering baseline for variance comparisons: the constant b
    closest to every reward in the mean-square sense.
    """
    _check_cap(mdp)
    total = 0.0
    for seq in mdp.sequences():
        _, p, r = mdp.rollout(seq)
        total += p * r
    return total


def mc_policy_gradient(mdp: TinyMDP, n_episodes: int,
                       rng: np.random.Generator, b: float = 0.0) -> dict[str, np.ndarray]:
    """Monte-Carlo REINFORCE estimate averaged over ``n_episodes`` rollouts.

    Episodes are grouped by their action sequence: sampling a multinomial count
    per sequence and weighting each sequence gradient by count/N is exactly the
    mean of per-episode terms (the environment is deterministic, so a sequence
    fixes the whole trajectory).
    """
    _check_cap(mdp)
    seqs = list(mdp.sequences())
    rollouts = [mdp.rollout(seq) for seq in seqs]
    probs = np.array([p for _, p, _ in rollouts])
    counts = rng.multinomial(n_episodes, probs / probs.sum())
    _zero_grads(mdp.policy)
    for (graphs, _, r), c in zip(rollouts, counts):
        if c == 0:
            continue
        w = c * (r - b) / n_episodes
        for lp in graphs:
            lp.backward(seed=w)
    grads = _grad_snapshot(mdp.policy)
    _zero_grads(mdp.policy)
    return grads


def flatten_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in sorted(grads)])


# -- tiny instances -----------------------------------------------------------

def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    img = 0.3 * np.sin(xx / 2.1) + 0.3 * np.cos(yy / 3.3)
    img += 0.3 * rng.standard_normal((h, w))
    return np.clip(img, -1.0, 1.0)


def _perturb(policy: PolicyNetwork, rng: np.random.Generator, sigma: float):
    for name in sorted(policy.params()):
        p = policy.params()[name]
        p.data = p.data + sigma * rng.standard_normal(p.data.shape)


def make_tiny_mdp(seed: int = 0, t_steps: int = 2, perturb: float = 0.1) -> TinyMDP:
    """4x4 position grid, one ratio, one scale, oracle enhancer, T=2."""
    rng = np.random.default_rng((seed, 71))
    cfg = PolicyConfig(image_h=16, image_w=16, z_base=8, grid_stride=4,
                       input_extent=16, feature_channels=(4, 4, 8, 8),
                       feature_dim=16, history_hidden=16, gru_hidden=32,
                       ratio_set=((1, 1),), scale_set=(1.0,))
    policy = PolicyNetwork(cfg, rng, dtype=np.float64)
    if perturb:
        _perturb(policy, rng, perturb)
    i_hr = _texture(rng, 16, 16)
    i_lr = imaging.bicubic_resize(i_hr, 8, 8)
    i_ref = imaging.bicubic_resize(i_lr, 16, 16)
    return TinyMDP(policy=policy, enhancer=OracleEnhancer(i_hr), i_lr=i_lr,
                   i_hr=i_hr, i_ref=i_ref, t_steps=t_steps)


def make_bandit(seed: int = 0, perturb: float = 0.0) -> TinyMDP:
    """Two-action single-step instance; reward 1 for action 0, else 0."""
    rng = np.random.default_rng((seed, 72))
    cfg = PolicyConfig(image_h=8, image_w=16, z_base=8, grid_stride=8,
                       input_extent=16, feature_channels=(4, 4, 8, 8),
                       feature_dim=16, history_hidden=16, gru_hidden=32,
                       ratio_set=((1, 1),), scale_set=(1.0,))
    policy = PolicyNetwork(cfg, rng, dtype=np.float64)
    if policy.head_sizes["x"] != 2 or policy.head_sizes["y"] != 1:
        raise AssertionError("bandit geometry drifted")
    if perturb:
        _perturb(policy, rng, perturb)
    i_hr = _texture(rng, 8, 16)
    i_lr = imaging.bicubic_resize(i_hr, 8, 16)

    def reward_fn(roll):
        return 1.0 if roll.traj.steps[0].action.xi == 0 else 0.0

    return TinyMDP(policy=policy, enhancer=OracleEnhancer(i_hr), i_lr=i_lr,
                   i_hr=i_hr, i_ref=i_hr, t_steps=1, reward_fn=reward_fn)


def bandit_gradient_variance(mdp: TinyMDP, n_episodes: int,
                             rng: np.random.Generator,
                             baseline: str = "ema",
                             decay: float = 0.9) -> float:
    """Mean per-coordinate variance of the per-episode REINFORCE gradient.

    The two per-action gradients are computed exactly once; the episode stream
    only varies the scalar weight (r - b), so moments decompose per action.
    """
    seqs = list(mdp.sequences())
    rollouts = [mdp.rollout(seq) for seq in seqs]
    probs = np.array([p for _, p, _ in rollouts])
    rewards = np.array([r for _, _, r in rollouts])
    gvecs = []
    for graphs, _, _ in rollouts:
        _zero_grads(mdp.policy)
        for lp in graphs:
            lp.backward()
        gvecs.append(flatten_grads(_grad_snapshot(mdp.policy)))
    _zero_grads(mdp.policy)
    gvecs = np.stack(gvecs)

    draws = rng.choice(len(seqs), size=n_episodes, p=probs / probs.sum())
    r_stream = rewards[draws]
    if baseline == "zero":
        b_stream = np.zeros(n_episodes)
    elif baseline == "ema":
        b_stream = np.empty(n_episodes)
        b = 0.0
        for i, r in enumerate(r_stream):
            b_stream[i] = b
            b = decay * b + (1.0 - decay) * r
    else:
        raise ValueError(f"unknown baseline mode {baseline!r}")
    c = r_stream - b_stream

    mean = np.zeros(gvecs.shape[1])
    second = np.zeros(gvecs.shape[1])
    for a in range(len(seqs)):
        sel = draws == a
        if not np.any(sel):
            continue
        m1 = float(np.mean(c * sel))
        m2 = float(np.mean((c * c) * sel))
        mean += m1 * gvecs[a]
        second += m2 * gvecs[a] ** 2
    var = second - mean ** 2
    return float(np.mean(var))


# -- coverage search ------------------------------------------------------------

def _footprint(box: Box, h: int, w: int) -> int:
    rows = ((1 << box.w) - 1) << box.left
    val = 0
    for r in range(box.top, box.top + box.h):
        val |= rows << (r * w)
    return val


def optimal_coverage_bruteforce(grid_hw, box_set, t_steps: int):
    """Exhaustive max coverage over all T-sequences from ``box_set``.

    Returns (best fraction, achieving sequence of boxes).
    """
    h, w = grid_hw
    n = len(box_set)
    if n ** t_steps > COVERAGE_CAP:
        raise ValueError(f"space too large: {n}^{t_steps} exceeds cap {COVERAGE_CAP}")
    masks = [_footprint(b, h, w) for b in box_set]
    best = -1
    best_seq = None
    for seq in itertools.product(range(n), repeat=t_steps):
        acc = 0
        for i in seq:
            acc |= masks[i]
        bits = acc.bit_count()
        if bits > best:
            best = bits
            best_seq = seq
    return best / (h * w), [box_set[i] for i in best_seq]


def greedy_coverage(grid_hw, box_set, t_steps: int) -> float:
    """Step-wise most-new-area heuristic; lower bound for the brute force."""
    h, w = grid_hw
    masks = [_footprint(b, h, w) for b in box_set]
    acc = 0
    for _ in range(t_steps):
        gains = [(acc | m).bit_count() for m in masks]
        acc |= masks[int(np.argmax(gains))]
    return acc.bit_count() / (h * w)
