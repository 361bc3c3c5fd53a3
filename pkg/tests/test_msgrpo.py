import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from conftest import SMALL, randomized
from hypothesis import given, settings
from hypothesis import strategies as st

from multiref.backbone import init_params
from multiref.msgrpo import (
    Prompt,
    RlConfig,
    advantages,
    kl_closed_form,
    msgrpo_loss,
    ratio,
    rollout_group,
    surrogate,
    train_rl,
)
from multiref.rewards import JudgeUnavailable, ProgrammaticJudge
from multiref.sampler import sigma_at, step_mean, transition_logpdf
from multiref.taskgen import generate

finite = st.floats(-100, 100, allow_nan=False)


def test_advantage_examples():
    np.testing.assert_allclose(advantages([1, 2, 3]), [-1.224744871, 0, 1.224744871], atol=1e-9)
    assert np.all(advantages([4, 4, 4, 4]) == 0)
    np.testing.assert_allclose(advantages(np.array([1, 2, 3]) * 3 + 10), advantages([1, 2, 3]), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=2, max_size=32), st.floats(0.01, 100), finite)
def test_advantage_properties(rewards, alpha, c):
    a = advantages(rewards)
    if np.std(rewards) < 1e-8:
        assert np.all(a == 0)
        return
    assert abs(a.mean()) < 1e-6
    assert abs(a.std() - 1.0) < 1e-6
    shifted = advantages(alpha * np.asarray(rewards) + c)
    if np.std(alpha * np.asarray(rewards) + c) >= 1e-8:
        np.testing.assert_allclose(shifted, a, atol=1e-6)


def test_ratio_examples():
    assert ratio(np.float64(3.0), np.float64(3.0)) == 1.0
    assert ratio(math.log(2.0), 0.0) == pytest.approx(2.0, rel=1e-15)
    assert ratio(np.float64(5000.0), np.float64(0.0)) == pytest.approx(1e6)
    assert ratio(torch.tensor(-5000.0, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64)) == \
        pytest.approx(1e-6)


@settings(max_examples=200, deadline=None)
@given(finite, finite)
def test_ratio_antisymmetry(a, b):
    assert ratio(np.float64(a), np.float64(b)) * ratio(np.float64(b), np.float64(a)) == pytest.approx(1.0, abs=1e-12)


def test_surrogate_hand_cases():
    assert surrogate(1.0, 1.0, 0.2) == 1.0
    assert surrogate(1.5, 1.0, 0.2) == 1.2
    assert surrogate(0.5, -1.0, 0.2) == -0.8
    with pytest.raises(ValueError):
        surrogate(1.0, 1.0, 1.5)


@pytest.mark.parametrize("r,adv,slope", [(1.5, 1.0, 0.0), (0.5, -1.0, 0.0), (1.1, 1.0, 1.0), (0.9, -2.0, -2.0),
                                         (0.5, 1.0, 1.0), (1.5, -1.0, -1.0)])
def test_surrogate_slope_by_finite_differences(r, adv, slope):
    h = 1e-6
    fd = (surrogate(r + h, adv) - surrogate(r - h, adv)) / (2 * h)
    assert fd == pytest.approx(slope, abs=1e-8)
    rt = torch.tensor(r, dtype=torch.float64, requires_grad=True)
    surrogate(rt, adv).backward()
    assert float(rt.grad) == pytest.approx(slope, abs=1e-12)


def test_kl_examples():
    v = np.random.default_rng(0).normal(size=(3, 4))
    assert kl_closed_form(v, v, 0.5, 0.04, 1.0) == 0
    assert kl_closed_form(np.ones(5), np.zeros(5), 0.5, 0.04, 1.0) == pytest.approx(0.045, abs=1e-15)
    with pytest.raises(ValueError):
        kl_closed_form(v, v, 0.5, 0.04, 0.0)


def test_kl_equals_gaussian_mean_gap():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        t, dt, a = rng.uniform(0.01, 0.99), rng.uniform(0.001, 0.1), rng.uniform(0.1, 3)
        sigma = sigma_at(t, a)
        x, v1, v2 = rng.normal(size=(3, 7))
        gap = step_mean(x, v1, t, dt, sigma) - step_mean(x, v2, t, dt, sigma)
        oracle = np.mean(gap ** 2) / (2 * sigma ** 2 * dt)
        assert kl_closed_form(v1, v2, t, dt, sigma) == pytest.approx(oracle, rel=1e-12, abs=1e-12)


def test_kl_monte_carlo():
    rng = np.random.default_rng(2)
    t, dt, sigma, d = 0.4, 0.04, 0.8, 3
    x, v_new, v_ref = rng.normal(size=(3, d))
    mu = step_mean(x, v_new, t, dt, sigma)
    draws = mu + sigma * math.sqrt(dt) * rng.standard_normal((100_000, d))
    log_new = transition_logpdf(draws, x[None], v_new[None], t, dt, sigma, batch_dims=1)
    log_ref = transition_logpdf(draws, x[None], v_ref[None], t, dt, sigma, batch_dims=1)
    per_coord = (log_new - log_ref) / d
    se = per_coord.std() / math.sqrt(len(per_coord))
    assert abs(per_coord.mean() - kl_closed_form(v_new, v_ref, t, dt, sigma)) < 3 * se


def test_config_validation():
    with pytest.raises(ValueError):
        RlConfig(group_size=1)
    with pytest.raises(ValueError):
        RlConfig(clip_eps=0)
    with pytest.raises(ValueError):
        RlConfig(beta=-1)
    cfg = RlConfig()
    assert cfg.group_size == 16 and cfg.beta == 0 and [n for n, _ in cfg.phases] == ["composition", "editing"]


FAST = dict(group_size=4, steps_per_trajectory=4, resolution=32, budget=32 * 32)


@pytest.fixture(scope="module")
def policy():
    return randomized(init_params(SMALL, 0), seed=11, std=0.05)


@pytest.fixture(scope="module")
def prompts():
    return [Prompt.from_sample(s) for s in generate(21, 6, edit_fraction=0.0)]


@pytest.fixture(scope="module")
def group(policy, prompts):
    return rollout_group(policy, prompts[0], RlConfig(**FAST), [[0, j] for j in range(4)], ProgrammaticJudge())


def test_rollout_group_shapes(group):
    assert group.size == 4 and group.old_logpdfs.shape == (4, 3)
    assert group.rewards.std() > 0
    np.testing.assert_allclose(group.advantages, advantages(group.rewards))
    assert all(im.size == (32, 32) for im in group.images)


def test_identical_seeds_identical_members(policy, prompts):
    g = rollout_group(policy, prompts[1], RlConfig(**FAST), [[7], [7], [8], [8]], ProgrammaticJudge())
    assert g.images[0] == g.images[1] and g.rewards[0] == g.rewards[1]
    assert np.array_equal(g.old_logpdfs[2], g.old_logpdfs[3])


def test_on_policy_ratio_is_one_and_loss_zero(group, policy):
    loss, stats = msgrpo_loss(group, policy, None, RlConfig(**FAST))
    assert stats["max_abs_log_ratio"] < 1e-9
    assert abs(float(loss)) < 1e-12
    assert stats["clip_fraction"] == 0 and stats["mean_kl"] == 0


def test_loss_invariant_to_reward_affine_maps(group, policy):
    perturbed = randomized(policy, seed=5, std=0.01)
    cfg = RlConfig(**FAST)
    base, _ = msgrpo_loss(group, perturbed, None, cfg)
    for alpha, c in [(2.0, 0.0), (3.0, 10.0)]:
        rewards = alpha * group.rewards + c
        g2 = dataclasses.replace(group, rewards=rewards, advantages=advantages(rewards))
        other, _ = msgrpo_loss(g2, perturbed, None, cfg)
        assert float(other) == pytest.approx(float(base), rel=1e-12, abs=1e-15)


def test_degenerate_group_has_zero_gradient(group, policy):
    flat = dataclasses.replace(group, rewards=np.full(4, 5.0), advantages=advantages(np.full(4, 5.0)))
    p = policy.clone()
    for a in p.arrays.values():
        a.requires_grad_(True)
    msgrpo_loss(flat, p, None, RlConfig(**FAST), backward=True)
    assert all(a.grad is None or torch.all(a.grad == 0) for a in p.arrays.values())


def test_kl_term_uses_reference(group, policy):
    cfg = RlConfig(**FAST, beta=0.5)
    _, same = msgrpo_loss(group, policy, policy, cfg)
    assert same["mean_kl"] == 0
    _, moved = msgrpo_loss(group, randomized(policy, seed=6, std=0.01), policy, cfg)
    assert moved["mean_kl"] > 0


def test_zero_steps_keep_params(policy, prompts):
    cfg = RlConfig(**FAST, phases=(("composition", 0),))
    final, _, metrics = train_rl(cfg, {"composition": prompts}, policy, ProgrammaticJudge())
    assert metrics == [] and final.content_hash() == policy.content_hash()


def test_training_run_bookkeeping(tmp_path, policy, prompts):
    cfg = RlConfig(**FAST, phases=(("composition", 2), ("editing", 1)), prompts_per_step=2, seed=3)
    editing = [Prompt.from_sample(s) for s in generate(22, 4, edit_fraction=1.0)]
    final, ckpts, metrics = train_rl(cfg, {"composition": prompts, "editing": editing}, policy, ProgrammaticJudge(),
                                     out_dir=tmp_path)
    assert [m["step"] for m in metrics] == [0, 1, 2]
    assert [m["phase"] for m in metrics] == ["composition", "composition", "editing"]
    # the adapter is non-zero after the first update; rollouts must still be exactly on-policy
    assert all(m["max_abs_log_ratio"] < 1e-9 for m in metrics)
    assert {"step", "phase", "mean_reward", "reward_std", "clip_fraction", "mean_kl", "loss", "wall_ms"} <= set(metrics[0])
    lines = [json.loads(x) for x in (tmp_path / "rl_metrics.jsonl").read_text().splitlines()]
    assert lines == metrics
    rewards = (tmp_path / "rewards.jsonl").read_text().splitlines()
    assert len(rewards) == 3 * 2 * 4
    assert [p.name for p in ckpts] == ["rl_final.ckpt"]
    # only adapted projections move
    changed = {k for k in policy.arrays if not torch.equal(policy[k], final[k])}
    assert changed and all(k.endswith(("qkv.w", "out.w", "fc1.w", "fc2.w")) for k in changed)
    train_rl(cfg, {"composition": prompts, "editing": editing}, policy, ProgrammaticJudge(), out_dir=tmp_path)
    assert len((tmp_path / "rewards.jsonl").read_text().splitlines()) == 24


def test_missing_phase_prompts_rejected(policy, prompts):
    with pytest.raises(ValueError, match="editing"):
        train_rl(RlConfig(**FAST, phases=(("composition", 1), ("editing", 1))), {"composition": prompts}, policy, ProgrammaticJudge())


class FlakyJudge(ProgrammaticJudge):
    kind = "flaky"

    def __call__(self, references, instruction, candidate):
        if len(references) == 1:
            raise JudgeUnavailable("down", 5)
        return super().__call__(references, instruction, candidate)


def test_judge_failure_skips_group(policy):
    ones = [Prompt.from_sample(s) for s in generate(23, 30, edit_fraction=0.0) if len(s.references) == 1][:1]
    cfg = RlConfig(**FAST, phases=(("composition", 1),), prompts_per_step=1)
    final, _, metrics = train_rl(cfg, {"composition": ones}, policy, FlakyJudge())
    assert metrics[0]["groups"] == 0 and metrics[0]["mean_reward"] is None
    assert final.content_hash() == policy.content_hash()
