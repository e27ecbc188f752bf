"""Joint training loop: supervised enhancer steps, terminal REINFORCE.

A batch of episodes advances in lockstep.  After every step t the enhancer
takes one ADAM step on the batch-mean patch loss; after the terminal step the
policy takes one REINFORCE step seeded with -a*(r_i - b)/B per episode, where
b is an exponential moving average of batch-mean rewards (decay 0.9,
initialized to the first batch mean and used before each update).

Rollout forward passes may run on a thread pool: episodes only read the
shared parameters, so results do not depend on scheduling.  All gradient
accumulation and optimizer updates happen sequentially in a fixed order,
which makes a whole run a deterministic function of (seed, config).

RNG streams are derived from the run seed by namespace so that resuming from
a checkpoint replays the identical remainder: (seed, 0) network init,
(seed, 1, episode_counter) per-episode sampling, (seed, 2) dataset split,
(seed, 3, epoch) shuffles.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import imaging
from .enhancer import EnhancerConfig, EnhancerNetwork
from .episode import EpisodeRollout, ReferenceRestorer
from .ndcore import Adam, load_checkpoint, ops, save_checkpoint
from .policy import PolicyConfig, PolicyNetwork

__all__ = [
    "TrainConfig", "Trainer", "train", "evaluate", "rng_for",
    "split_dataset", "save_training_checkpoint", "load_training_checkpoint",
    "load_networks", "METRICS_HEADER",
]

METRICS_HEADER = "epoch,mean_reward,baseline_b,val_psnr,val_ssim,coverage_mean"


def rng_for(seed: int, namespace: int, *rest: int) -> np.random.Generator:
    """Derived generator for one (namespace, counter...) stream of a run."""
    return np.random.default_rng(np.random.SeedSequence((seed, namespace) + rest))


def split_dataset(pairs, val_fraction: float, seed: int):
    """Disjoint train/val split, deterministic in the run seed."""
    n = len(pairs)
    n_val = int(round(n * val_fraction))
    order = rng_for(seed, 2).permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [pairs[i] for i in range(n) if i not in val_idx]
    val = [pairs[i] for i in range(n) if i in val_idx]
    return train, val


@dataclass
class TrainConfig:
    t_steps: int = 18
    lr: float = 3e-4
    weight_decay: float = 1e-7
    beta1: float = 0.5
    batch: int = 16
    lam: float = 1.0
    reward_scale: float = 1.0
    baseline: str = "ema"            # "ema" or "zero"
    baseline_decay: float = 0.9
    seed: int = 0
    dtype: str = "float64"           # numeric mode for the networks
    epochs: int = 20
    checkpoint_every: int = 0        # epochs between snapshots; 0 = final only
    reference: str = "bicubic"       # reward anchor: bicubic or single_pass

    def __post_init__(self):
        if self.t_steps < 1:
            raise ValueError("t_steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for key in ("lr", "reward_scale"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lam must be non-negative")
        if self.baseline not in ("ema", "zero"):
            raise ValueError(f"unknown baseline mode {self.baseline!r}")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.reference not in ("bicubic", "single_pass"):
            raise ValueError(f"unknown reference kind {self.reference!r}")


def _run_forwards(rollouts, executor):
    if executor is None or len(rollouts) <= 1:
        for roll in rollouts:
            roll.step()
    else:
        list(executor.map(lambda r: r.step(), rollouts))


class Trainer:
    """Holds optimizer and baseline state so runs can pause and resume."""

    def __init__(self, policy: PolicyNetwork, enhancer: EnhancerNetwork,
                 cfg: TrainConfig, reference: ReferenceRestorer | None = None):
        self.policy = policy
        self.enhancer = enhancer
        self.cfg = cfg
        self.opt_policy = Adam(policy.params(), lr=cfg.lr, beta1=cfg.beta1,
                               weight_decay=cfg.weight_decay)
        self.opt_enhancer = Adam(enhancer.params(), lr=cfg.lr, beta1=cfg.beta1,
                                 weight_decay=cfg.weight_decay)
        self.baseline: float | None = None
        self.episode_counter = 0
        self.epoch = 0
        if reference is None:
            reference = ReferenceRestorer(cfg.reference, enhancer=enhancer,
                                          state_dim=policy.cfg.state_dim)
        self.reference = reference

    def _episode_rng(self) -> np.random.Generator:
        rng = rng_for(self.cfg.seed, 1, self.episode_counter)
        self.episode_counter += 1
        return rng

    def run_batch(self, pairs, executor=None):
        """One lockstep batch: T supervised updates, then one policy update.

        Returns the finished trajectories.
        """
        cfg = self.cfg
        rollouts = [
            EpisodeRollout(i_lr, self.policy, self.enhancer, cfg.t_steps,
                           rng=self._episode_rng(), mode="sample", i_hr=i_hr)
            for i_lr, i_hr in pairs
        ]
        n = len(rollouts)
        inv_n = np.float64(1.0 / n)
        for _ in range(cfg.t_steps):
            _run_forwards(rollouts, executor)
            self.opt_enhancer.zero_grad()
            for roll in rollouts:
                if roll.last_loss is not None:
                    roll.last_loss.backward(inv_n)
                roll.last_loss = None
            self.opt_enhancer.step()

        trajs = [roll.finish(self.reference, cfg.lam) for roll in rollouts]
        rewards = np.array([t.reward for t in trajs], dtype=np.float64)
        batch_mean = float(rewards.mean())
        if cfg.baseline == "ema":
            if self.baseline is None:
                self.baseline = batch_mean
            b = self.baseline
            self.baseline = (cfg.baseline_decay * self.baseline
                             + (1.0 - cfg.baseline_decay) * batch_mean)
        else:
            b = 0.0

        self.opt_policy.zero_grad()
        for roll, traj in zip(rollouts, trajs):
            total = None
            for rec in traj.steps:
                total = rec.log_prob if total is None else ops.add(total, rec.log_prob)
            seed = np.float64(-cfg.reward_scale * (traj.reward - b) / n)
            total.backward(seed)
        self.opt_policy.step()
        return trajs

    def baseline_value(self) -> float:
        if self.cfg.baseline == "zero" or self.baseline is None:
            return 0.0
        return self.baseline


def evaluate(pairs, policy, enhancer, t_steps, reference=None, lam=1.0,
             workers=1):
    """Greedy rollouts over a dataset; per-image quality rows.

    Each row reports the episode result next to the raw bicubic upscale so
    callers can difference the columns.
    """
    if reference is None:
        reference = ReferenceRestorer("bicubic")
    rollouts = [
        EpisodeRollout(i_lr, policy, enhancer, t_steps, mode="greedy", i_hr=i_hr)
        for i_lr, i_hr in pairs
    ]
    if workers > 1 and len(rollouts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(lambda r: [r.step() for _ in range(t_steps)], rollouts))
    else:
        for roll in rollouts:
            for _ in range(t_steps):
                roll.step()
    rows = []
    for roll, (i_lr, i_hr) in zip(rollouts, pairs):
        traj = roll.finish(reference, lam)
        i_ref = reference.restore(i_lr, i_hr.shape)
        rows.append({
            "psnr": traj.psnr_t,
            "ssim": traj.ssim_t,
            "psnr_ref": imaging.psnr(i_ref, i_hr),
            "ssim_ref": imaging.ssim(i_ref, i_hr),
            "coverage": traj.coverage,
            "reward": traj.reward,
        })
    return rows


def _epoch_metrics_row(epoch, mean_reward, baseline_b, val_rows, coverage_mean):
    if val_rows:
        val_psnr = float(np.mean([r["psnr"] for r in val_rows]))
        val_ssim = float(np.mean([r["ssim"] for r in val_rows]))
    else:
        val_psnr = float("nan")
        val_ssim = float("nan")
    return {
        "epoch": epoch,
        "mean_reward": mean_reward,
        "baseline_b": baseline_b,
        "val_psnr": val_psnr,
        "val_ssim": val_ssim,
        "coverage_mean": coverage_mean,
    }


def _format_metrics_row(row) -> str:
    return ",".join([str(row["epoch"])] + [
        repr(float(row[k]))
        for k in ("mean_reward", "baseline_b", "val_psnr", "val_ssim",
                  "coverage_mean")
    ])


def train(train_pairs, val_pairs, policy, enhancer, cfg: TrainConfig,
          run_dir=None, workers: int = 1, trainer: Trainer | None = None,
          manifest_extra=None, log=None):
    """Run cfg.epochs of joint training; returns (trainer, metric rows).

    With `run_dir` set, appends metrics.csv rows as epochs finish and writes
    checkpoints (every `checkpoint_every` epochs plus a final one).  Passing
    an existing `trainer` resumes from its epoch counter.
    """
    if not train_pairs:
        raise ValueError("empty training dataset")
    if trainer is None:
        trainer = Trainer(policy, enhancer, cfg)
    metrics_path = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        metrics_path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(metrics_path):
            with open(metrics_path, "w") as fh:
                fh.write(METRICS_HEADER + "\n")

    executor = None
    if workers > 1:
        executor = ThreadPoolExecutor(max_workers=workers)
    rows = []
    try:
        for epoch in range(trainer.epoch + 1, cfg.epochs + 1):
            order = rng_for(cfg.seed, 3, epoch).permutation(len(train_pairs))
            epoch_rewards = []
            epoch_coverages = []
            for start in range(0, len(order), cfg.batch):
                chunk = [train_pairs[int(i)] for i in order[start:start + cfg.batch]]
                trajs = trainer.run_batch(chunk, executor)
                epoch_rewards.extend(t.reward for t in trajs)
                epoch_coverages.extend(t.coverage for t in trajs)
            val_rows = evaluate(val_pairs, policy, enhancer, cfg.t_steps,
                                trainer.reference, cfg.lam,
                                workers=max(1, workers))
            row = _epoch_metrics_row(
                epoch, float(np.mean(epoch_rewards)), trainer.baseline_value(),
                val_rows, float(np.mean(epoch_coverages)))
            rows.append(row)
            trainer.epoch = epoch
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(_format_metrics_row(row) + "\n")
            if run_dir is not None:
                final = epoch == cfg.epochs
                interval = cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0
                if final or interval:
                    name = f"checkpoint_{epoch:04d}.pwck"
                    save_training_checkpoint(os.path.join(run_dir, name),
                                             trainer, extra=manifest_extra)
                    if final:
                        save_training_checkpoint(
                            os.path.join(run_dir, "checkpoint_final.pwck"),
                            trainer, extra=manifest_extra)
            if log is not None:
                log(_format_metrics_row(row))
    finally:
        if executor is not None:
            executor.shutdown()
    return trainer, rows


# -- persistence ------------------------------------------------------------------

def _policy_cfg_from_dict(d) -> PolicyConfig:
    d = dict(d)
    d["feature_channels"] = tuple(d["feature_channels"])
    d["ratio_set"] = tuple(tuple(r) for r in d["ratio_set"])
    d["scale_set"] = tuple(d["scale_set"])
    return PolicyConfig(**d)


def _enhancer_cfg_from_dict(d) -> EnhancerConfig:
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    return EnhancerConfig(**d)


def save_training_checkpoint(path, trainer: Trainer, extra=None) -> None:
    policy, enhancer = trainer.policy, trainer.enhancer
    arrays = {}
    for name, p in policy.params().items():
        arrays["policy." + name] = p.data
    for name, p in enhancer.params().items():
        arrays[name] = p.data
    arrays.update(trainer.opt_policy.state_arrays("adam.policy"))
    arrays.update(trainer.opt_enhancer.state_arrays("adam.enh"))
    manifest = {
        "format": 1,
        "epoch": trainer.epoch,
        "episode_counter": trainer.episode_counter,
        "baseline": trainer.baseline,
        "adam_policy_t": trainer.opt_policy.t,
        "adam_enhancer_t": trainer.opt_enhancer.t,
        "train_config": asdict(trainer.cfg),
        "policy_config": asdict(policy.cfg),
        "enhancer_config": asdict(enhancer.cfg),
    }
    if extra:
        manifest.update(extra)
    save_checkpoint(path, manifest, arrays)


def _restore_networks(manifest, arrays):
    dtype = np.dtype(manifest["train_config"]["dtype"])
    rng = np.random.default_rng(0)  # shapes only; every value is overwritten
    policy = PolicyNetwork(_policy_cfg_from_dict(manifest["policy_config"]),
                           rng, dtype=dtype)
    enhancer = EnhancerNetwork(_enhancer_cfg_from_dict(manifest["enhancer_config"]),
                               rng, dtype=dtype)
    for name, p in policy.params().items():
        p.data = np.ascontiguousarray(arrays["policy." + name], dtype=p.data.dtype)
    for name, p in enhancer.params().items():
        p.data = np.ascontiguousarray(arrays[name], dtype=p.data.dtype)
    return policy, enhancer


def load_networks(path):
    """Rebuild the two networks from a checkpoint; inference entry point.

    Returns (policy, enhancer, manifest).
    """
    manifest, arrays = load_checkpoint(path)
    policy, enhancer = _restore_networks(manifest, arrays)
    return policy, enhancer, manifest


def load_training_checkpoint(path):
    """Restore networks plus full optimizer/baseline state for resuming."""
    manifest, arrays = load_checkpoint(path)
    policy, enhancer = _restore_networks(manifest, arrays)
    cfg = TrainConfig(**manifest["train_config"])
    trainer = Trainer(policy, enhancer, cfg)
    trainer.opt_policy.load_state_arrays("adam.policy", arrays,
                                         manifest["adam_policy_t"])
    trainer.opt_enhancer.load_state_arrays("adam.enh", arrays,
                                           manifest["adam_enhancer_t"])
    trainer.baseline = manifest["baseline"]
    trainer.episode_counter = int(manifest["episode_counter"])
    trainer.epoch = int(manifest["epoch"])
    return trainer
