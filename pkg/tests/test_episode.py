"""Rollout environment: box placement, coverage, reward, masking, sources."""

import numpy as np
import pytest

from patchwalk import imaging
from patchwalk.episode import (Box, EpisodeRollout, OracleEnhancer,
                               PolicySource, RandomSource, ReferenceRestorer,
                               action_regions, baseline_policy,
                               box_from_action, compute_reward,
                               coverage_fraction, run_episode,
                               update_coverage, write_trajectory_csv)
from patchwalk.policy import Action, PolicyConfig, PolicyNetwork


def tiny_policy(seed=0, **kw):
    base = dict(image_h=16, image_w=16, z_base=8, grid_stride=4,
                input_extent=16, feature_channels=(4, 4, 8, 8),
                feature_dim=16, history_hidden=16, gru_hidden=32,
                ratio_set=((1, 1),), scale_set=(1.0,))
    base.update(kw)
    rng = np.random.default_rng(seed)
    policy = PolicyNetwork(PolicyConfig(**base), rng)
    for name in sorted(policy.params()):
        p = policy.params()[name]
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    return policy


def texture(seed, h=16, w=16):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.clip(0.4 * np.sin(xx / 1.7) + 0.4 * np.cos(yy / 2.9)
                   + 0.2 * rng.standard_normal((h, w)), -1, 1)


# -- box placement ---------------------------------------------------------------

def test_box_centers_on_the_action():
    assert box_from_action(Action(8, 8, 0, 0, 8, 8), 16, 16) == Box(4, 4, 8, 8)
    assert box_from_action(Action(9, 5, 0, 0, 5, 6), 16, 16) == Box(2, 6, 5, 6)


def test_box_shifts_inward_at_borders():
    near = box_from_action(Action(2, 2, 0, 0, 8, 8), 16, 16)
    assert near == Box(0, 0, 8, 8)
    far = box_from_action(Action(15, 15, 0, 0, 8, 8), 16, 16)
    assert far == Box(8, 8, 8, 8)


def test_oversized_box_shrinks_to_the_image():
    assert box_from_action(Action(8, 8, 0, 0, 20, 24), 16, 16) == Box(0, 0, 16, 16)


# -- coverage and reward ------------------------------------------------------------

def test_coverage_is_monotone_and_idempotent():
    mask = np.zeros((16, 16), dtype=np.uint8)
    update_coverage(mask, Box(0, 0, 8, 8))
    c1 = coverage_fraction(mask)
    update_coverage(mask, Box(0, 0, 8, 8))
    assert coverage_fraction(mask) == c1 == 0.25
    update_coverage(mask, Box(4, 4, 8, 8))
    assert coverage_fraction(mask) > c1


def test_tiling_reaches_full_coverage():
    mask = np.zeros((16, 16), dtype=np.uint8)
    for top in (0, 8):
        for left in (0, 8):
            update_coverage(mask, Box(top, left, 8, 8))
    assert coverage_fraction(mask) == 1.0


def test_reward_is_psnr_gain_plus_coverage_bonus():
    gt = texture(0)
    i_t = np.clip(gt + 0.05, -1, 1)
    i_ref = np.clip(gt + 0.2, -1, 1)
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[:8] = 1
    lam = 0.7
    want = imaging.psnr(i_t, gt) - imaging.psnr(i_ref, gt) + lam * 0.5
    assert abs(compute_reward(i_t, gt, i_ref, mask, lam) - want) < 1e-12


# -- reference restorers --------------------------------------------------------------

def test_bicubic_reference_matches_plain_upscale():
    i_lr = texture(1, 8, 8)
    ref = ReferenceRestorer("bicubic")
    np.testing.assert_array_equal(ref.restore(i_lr, (16, 16)),
                                  imaging.bicubic_resize(i_lr, 16, 16))


def test_unknown_reference_kind_raises():
    with pytest.raises(ValueError):
        ReferenceRestorer("nearest")
    with pytest.raises(ValueError):
        ReferenceRestorer("single_pass")  # needs an enhancer


def test_oracle_enhancer_pastes_ground_truth_inside_the_box_only():
    gt = texture(2)
    i_t = np.zeros((16, 16))
    out, loss = OracleEnhancer(gt).enhance_step(i_t, i_t, None, (2, 3, 5, 4))
    assert loss is None
    np.testing.assert_array_equal(out[2:7, 3:7], gt[2:7, 3:7])
    out[2:7, 3:7] = 0.0
    np.testing.assert_array_equal(out, np.zeros((16, 16)))


# -- region aliasing under clamping -----------------------------------------------------

def test_action_regions_partition_the_grid():
    policy = tiny_policy()
    rect_of, classes = action_regions(policy.cfg)
    assert len(rect_of) == 16  # 4x4 grid, one ratio, one scale
    assert sorted(k for ks in classes.values() for k in ks) == sorted(rect_of)
    for key, rect in rect_of.items():
        assert key in classes[rect]


def test_action_regions_cache_returns_the_same_object():
    policy = tiny_policy()
    assert action_regions(policy.cfg)[0] is action_regions(policy.cfg)[0]


def test_whole_image_boxes_collapse_to_one_region():
    # z_base = image extent: every center decodes to the same placed rectangle
    policy = tiny_policy(z_base=16)
    rect_of, classes = action_regions(policy.cfg)
    assert set(rect_of.values()) == {(0, 0, 16, 16)}
    assert len(classes[(0, 0, 16, 16)]) == 16


def test_one_selection_masks_the_whole_alias_class():
    gt = texture(3)
    policy = tiny_policy(z_base=16, scale_set=(0.5, 1.0))
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 2,
                          rng=np.random.default_rng(0), mode="sample")
    # force a full-image box: any center with scale id 1 aliases to the same rect
    class Pin(PolicySource):
        def select(self, dist, rng, mode, step):
            if step == 0:
                a = dist._make_action(1, 2, 0, 1)
                return a, dist.log_prob(a)
            return super().select(dist, rng, mode, step)

    roll.source = Pin()
    roll.step()
    assert len(roll.forbidden) == 16  # all 16 full-image tuples, not just one
    rec = roll.step()  # second step must come from the 8x8 scale
    assert rec.action.scale_id == 0


def test_exact_repeat_has_zero_probability_in_the_next_distribution():
    gt = texture(4)
    policy = tiny_policy(seed=5)
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 2,
                          rng=np.random.default_rng(1), mode="sample")
    first = roll.step().action
    v = policy.extract_features(
        imaging.bicubic_resize(roll.i_t, policy.cfg.input_extent,
                               policy.cfg.input_extent))
    s = policy.encode_state(v, roll.v_0, policy.encode_history(roll.actions))
    dist, _ = policy.step_policy(s, roll.h_gru, roll.forbidden)
    assert dist.joint_prob(first) == 0.0
    assert abs(dist.joint().sum() - 1.0) < 1e-12


def test_rollout_never_repeats_a_region():
    gt = texture(5)
    policy = tiny_policy(seed=6)
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 6,
                          rng=np.random.default_rng(2), mode="sample")
    while not roll.done:
        roll.step()
    rects = [box_from_action(a, 16, 16).as_tuple() for a in roll.actions]
    assert len(set(rects)) == len(rects)


# -- action sources ------------------------------------------------------------------

def test_random_source_is_uniform_over_unmasked_tuples():
    gt = texture(6)
    policy = tiny_policy(seed=7)
    src = RandomSource()
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 3,
                          rng=np.random.default_rng(3), mode="sample", source=src)
    recs = [roll.step() for _ in range(3)]
    # 16 tuples at step 0, then one fewer per step
    for rec, n in zip(recs, (16, 15, 14)):
        assert abs(rec.log_prob + np.log(n)) < 1e-12


def test_raster_source_tiles_to_full_coverage():
    gt = texture(7)
    policy = tiny_policy(seed=8)
    src = baseline_policy("raster", 16, 16, 8, ((1, 1),), (1.0,))
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 4, mode="greedy", source=src)
    while not roll.done:
        roll.step()
    assert coverage_fraction(roll.mask) == 1.0


def test_fixed_box_source_pins_ratio_and_scale():
    gt = texture(8)
    policy = tiny_policy(seed=9, ratio_set=((3, 2), (1, 1)),
                         scale_set=(0.5, 1.0))
    src = baseline_policy("fixed_box", 16, 16, 8, ((3, 2), (1, 1)), (0.5, 1.0))
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 3,
                          rng=np.random.default_rng(4), mode="sample", source=src)
    while not roll.done:
        roll.step()
    assert all(a.ratio_id == 1 and a.scale_id == 1 for a in roll.actions)
    assert len({a.key() for a in roll.actions}) == 3


def test_unknown_baseline_kind_raises():
    with pytest.raises(ValueError):
        baseline_policy("zigzag", 16, 16, 8, ((1, 1),), (1.0,))


def test_missing_pinned_table_entry_raises():
    with pytest.raises(ValueError):
        baseline_policy("raster", 16, 16, 8, ((3, 2),), (1.0,))


# -- full episodes ----------------------------------------------------------------------

def test_full_coverage_oracle_episode_restores_ground_truth():
    gt = texture(9)
    policy = tiny_policy(seed=10)
    src = baseline_policy("raster", 16, 16, 8, ((1, 1),), (1.0,))
    traj = run_episode(imaging.bicubic_resize(gt, 8, 8), policy,
                       OracleEnhancer(gt), 4, mode="greedy", source=src,
                       i_hr=gt, reference=ReferenceRestorer("bicubic"), lam=0.3)
    np.testing.assert_array_equal(traj.i_t, gt)
    assert traj.psnr_t == imaging.PSNR_CAP
    i_ref = imaging.bicubic_resize(imaging.bicubic_resize(gt, 8, 8), 16, 16)
    want = (imaging.PSNR_CAP - imaging.psnr(i_ref, gt)) + 0.3
    assert abs(traj.reward - want) < 1e-9


def test_self_reference_zeroes_the_psnr_term():
    gt = texture(10)
    policy = tiny_policy(seed=11)
    traj = run_episode(imaging.bicubic_resize(gt, 8, 8), policy,
                       OracleEnhancer(gt), 2, mode="sample",
                       rng=np.random.default_rng(5), i_hr=gt,
                       reference=ReferenceRestorer("self"), lam=1.0)
    assert abs(traj.reward - traj.coverage) < 1e-12


def test_rewardless_episode_without_ground_truth():
    gt = texture(11)
    policy = tiny_policy(seed=12)
    traj = run_episode(imaging.bicubic_resize(gt, 8, 8), policy,
                       OracleEnhancer(gt), 2, mode="sample",
                       rng=np.random.default_rng(6))
    assert traj.reward is None and traj.psnr_t is None
    assert len(traj.steps) == 2


def test_stepping_past_terminal_raises():
    gt = texture(12)
    policy = tiny_policy(seed=13)
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 1,
                          rng=np.random.default_rng(7), mode="sample")
    roll.step()
    with pytest.raises(RuntimeError):
        roll.step()


def test_finishing_early_raises():
    gt = texture(13)
    policy = tiny_policy(seed=14)
    roll = EpisodeRollout(imaging.bicubic_resize(gt, 8, 8), policy,
                          OracleEnhancer(gt), 2,
                          rng=np.random.default_rng(8), mode="sample")
    roll.step()
    with pytest.raises(RuntimeError):
        roll.finish()


def test_episodes_are_deterministic_in_the_rng():
    gt = texture(14)
    policy = tiny_policy(seed=15)

    def go(seed):
        return run_episode(imaging.bicubic_resize(gt, 8, 8), policy,
                           OracleEnhancer(gt), 3, mode="sample",
                           rng=np.random.default_rng(seed), i_hr=gt,
                           reference=ReferenceRestorer("bicubic"))

    a, b = go(42), go(42)
    assert [r.action for r in a.steps] == [r.action for r in b.steps]
    assert a.reward == b.reward


def test_trajectory_csv_layout(tmp_path):
    gt = texture(15)
    policy = tiny_policy(seed=16)
    traj = run_episode(imaging.bicubic_resize(gt, 8, 8), policy,
                       OracleEnhancer(gt), 3, mode="sample",
                       rng=np.random.default_rng(9), i_hr=gt,
                       reference=ReferenceRestorer("bicubic"))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, traj)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,y,ratio_id,scale_id,Lh,Lw,logprob,step_loss"
    assert len(lines) == 1 + 3 + 2  # header, steps, terminal header + row
    terminal = lines[-1].split(",")
    assert float(terminal[0]) == traj.reward
    assert float(terminal[3]) == traj.coverage
