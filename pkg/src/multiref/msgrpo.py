"""Multi-source GRPO: group rollouts, relative advantages, clipped ratios, closed-form KL.

Each prompt gets ``G`` stochastic rollouts. Rewards are normalized within the
group, every stochastic step contributes a clipped ratio term against the
rollout-time log-density, and the per-step KL to the frozen SFT policy has a
closed form because both transition kernels are Gaussians sharing one
variance. Only low-rank adapter factors are trained by default.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import ModelParams, apply_adapter, collate, expand, init_adapter, merge_adapter
from .checkpoint import save_checkpoint
from .flowmatch import TrainingSample
from .instructions import Instruction
from .packing import PackedSequence, pack_condition
from .rasters import RasterImage
from .rewards import JudgeError, RewardBreakdown, RewardLog, judge_many
from .sampler import EPS_T, STOCHASTIC, Trajectory, latent_to_image, sample_many, sigma_at, transition_logpdf, velocities

log = logging.getLogger(__name__)

LOG_RATIO_CLAMP = math.log(1e6)


def advantages(rewards: Sequence[float], floor: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    std = r.std()
    if not std >= floor:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def ratio(new_logpdf, old_logpdf):
    """``exp(new - old)`` with the log-ratio clamped to ``[log 1e-6, log 1e6]``."""
    d = new_logpdf - old_logpdf
    if torch.is_tensor(d):
        return torch.exp(torch.clamp(d, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    return np.exp(np.clip(d, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))


def surrogate(r, adv, clip_eps: float = 0.2):
    if not 0.0 < clip_eps < 1.0:
        raise ValueError("clip_eps must lie in (0, 1)")
    if torch.is_tensor(r):
        return torch.minimum(r * adv, torch.clamp(r, 1 - clip_eps, 1 + clip_eps) * adv)
    return np.minimum(r * adv, np.clip(r, 1 - clip_eps, 1 + clip_eps) * adv)


def kl_closed_form(v_new, v_ref, t: float, dt: float, sigma: float, eps_t: float = EPS_T, batch_dims: int = 0):
    """Per-step KL between the current and reference Gaussian kernels.

    ``(dt/2) * (sigma (1-t) / (2 max(t, eps)) + 1/sigma)^2 * mean((v_new - v_ref)^2)``
    """
    if not sigma > 0:
        raise ValueError("deterministic steps carry no KL; sigma must be > 0")
    coef = 0.5 * dt * (sigma * (1.0 - t) / (2.0 * max(t, eps_t)) + 1.0 / sigma) ** 2
    sq = (v_new - v_ref) ** 2
    dims = tuple(range(batch_dims, sq.ndim))
    if torch.is_tensor(sq):
        return coef * sq.mean(dim=dims)
    return coef * sq.mean(axis=dims)


@dataclass
class RlConfig:
    group_size: int = 16
    steps_per_trajectory: int = 25     # T
    noise_level: float = 1.5           # a
    beta: float = 0.0
    clip_eps: float = 0.2
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    adapter_rank: int = 4
    adapter_alpha: float = 8.0
    full_parameter: bool = False
    phases: tuple[tuple[str, int], ...] = (("composition", 100), ("editing", 0))
    prompts_per_step: int = 2
    inner_epochs: int = 1
    resolution: int = 32
    budget: int = 64 * 64
    patch_pixels: int = 4
    reward_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    adv_floor: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.steps_per_trajectory < 1:
            raise ValueError("steps_per_trajectory must be >= 1")
        self.phases = tuple((str(n), int(s)) for n, s in self.phases)


@dataclass
class Prompt:
    id: str
    references: list[RasterImage]
    instruction: Instruction

    @classmethod
    def from_sample(cls, s: TrainingSample) -> Prompt:
        return cls(s.id, list(s.references), s.instruction)


@dataclass
class GroupRollout:
    prompt_id: str
    pack: PackedSequence
    instruction: Instruction
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logpdfs: np.ndarray            # G x S, frozen at rollout time
    breakdowns: list[RewardBreakdown] = field(default_factory=list)
    images: list[RasterImage] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.trajectories)


def rollout_group(params: ModelParams, prompt: Prompt, config: RlConfig, seeds: Sequence, judge) -> GroupRollout:
    """``len(seeds)`` independent SDE rollouts for one prompt, judged and normalized."""
    size = (config.resolution, config.resolution)
    pack, grid = pack_condition(prompt.references, size, config.budget, config.patch_pixels)
    rngs = [np.random.default_rng(s) for s in seeds]
    trajs = sample_many(params, [pack] * len(rngs), [prompt.instruction] * len(rngs), rngs,
                        config.steps_per_trajectory, STOCHASTIC, config.noise_level)
    images = [latent_to_image(tr.final, grid, config.patch_pixels) for tr in trajs]
    breakdowns = judge_many(judge, [(prompt.references, prompt.instruction, im) for im in images])
    rewards = np.array([b.total for b in breakdowns])
    return GroupRollout(
        prompt_id=prompt.id,
        pack=pack,
        instruction=prompt.instruction,
        trajectories=trajs,
        rewards=rewards,
        advantages=advantages(rewards, config.adv_floor),
        old_logpdfs=np.array([tr.step_logpdfs for tr in trajs], dtype=np.float64),
        breakdowns=breakdowns,
        images=images,
    )


def _step_terms(group: GroupRollout, params: ModelParams, ref_params: ModelParams | None, config: RlConfig,
                step_pos: int):
    """Surrogate, KL and ratio tensors (each of length G) for one recorded stochastic step.

    All group members at one step are evaluated as a single batch, matching how
    the rollout evaluated them, so on-policy ratios are exactly one.
    """
    tr0 = group.trajectories[0]
    i = tr0.stochastic_steps[step_pos]
    t, dt = tr0.times[i], tr0.dt
    sigma = sigma_at(t, tr0.a)
    g = group.size
    x = torch.as_tensor(np.stack([tr.states[i] for tr in group.trajectories]))
    x_next = torch.as_tensor(np.stack([tr.states[i + 1] for tr in group.trajectories]))
    cond = expand(collate([group.pack], [group.instruction], params.config, dtype=params.dtype), g)
    v = velocities(params, cond, x, t)
    new_lp = transition_logpdf(x_next, x, v, t, dt, sigma, batch_dims=1)
    r = ratio(new_lp, torch.as_tensor(group.old_logpdfs[:, step_pos]))
    adv = torch.as_tensor(group.advantages)
    s = surrogate(r, adv, config.clip_eps)
    if config.beta > 0 and ref_params is not None:
        with torch.no_grad():
            v_ref = velocities(ref_params, cond, x, t)
        kl = kl_closed_form(v, v_ref, t, dt, sigma, batch_dims=1)
    else:
        kl = torch.zeros(g, dtype=torch.float64)
    return s, kl, r


def msgrpo_loss(group: GroupRollout, params: ModelParams | Callable[[], ModelParams], ref_params: ModelParams | None,
                config: RlConfig, backward: bool = False) -> tuple[torch.Tensor, dict]:
    """Negated objective ``-(1/G) sum_i (1/S_i) sum_steps [S(r, A_i) - beta KL]``.

    With ``backward=True`` gradients are accumulated step by step (bounded
    memory) and the returned loss is detached. ``params`` may be a zero-argument
    callable, rebuilt per step so adapted weights get a fresh graph each time.
    """
    n_steps = group.old_logpdfs.shape[1] if group.old_logpdfs.ndim == 2 else 0
    if n_steps == 0:
        raise ValueError("group has no stochastic steps")
    g = group.size
    total = torch.zeros((), dtype=torch.float64)
    clipped, kls, ratios = [], [], []
    for pos in range(n_steps):
        p = params() if callable(params) else params
        s, kl, r = _step_terms(group, p, ref_params, config, pos)
        term = -(s - config.beta * kl).sum() / (g * n_steps)
        if not torch.isfinite(term):
            raise FloatingPointError(f"non-finite loss term at stochastic step {pos}")
        if backward:
            term.backward()
            term = term.detach()
        total = total + term
        rd = r.detach()
        clipped.append(((rd - 1).abs() > config.clip_eps).double())
        kls.append(kl.detach())
        ratios.append(rd)
    stats = {
        "clip_fraction": float(torch.cat(clipped).mean()),
        "mean_kl": float(torch.stack(kls).mean()),
        "max_abs_log_ratio": float(torch.stack(ratios).log().abs().max()),
    }
    return total, stats


def _phase_of(step: int, phases) -> str:
    acc = 0
    for name, n in phases:
        acc += n
        if step < acc:
            return name
    return phases[-1][0]


def train_rl(config: RlConfig, prompt_sets: dict[str, Sequence[Prompt]], params: ModelParams, judge,
             out_dir: str | Path | None = None, run_id: str = "rl",
             on_metrics: Callable[[dict], None] | None = None):
    """MSGRPO fine-tuning from an SFT checkpoint; returns ``(params, checkpoints, metrics)``.

    The returned params are standalone (adapters merged).
    """
    params.check()
    total_steps = sum(n for _, n in config.phases)
    for name, n in config.phases:
        if n > 0 and not prompt_sets.get(name):
            raise ValueError(f"phase {name!r} has no prompts")
    ref_params = params.clone()
    base = params.clone()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reward_log = None
    if out is not None:
        (out / "rewards.jsonl").write_text("")
        reward_log = RewardLog(out / "rewards.jsonl", run_id)
    metrics_file = (out / "rl_metrics.jsonl").open("w") if out is not None else None

    if config.full_parameter:
        adapter = None
        trainable = list(base.arrays.values())
    else:
        adapter = init_adapter(base, config.adapter_rank, config.adapter_alpha, seed=config.seed)
        trainable = adapter.tensors()
    for a in trainable:
        a.requires_grad_(True)
    opt = torch.optim.Adam(trainable, lr=config.lr, betas=config.betas, eps=config.eps,
                           weight_decay=config.weight_decay)

    def policy() -> ModelParams:
        return apply_adapter(base, adapter) if adapter is not None else base

    metrics, checkpoints = [], []
    try:
        for step in range(total_steps):
            t0 = time.perf_counter()
            phase = _phase_of(step, config.phases)
            prompts = prompt_sets[phase]
            rng = np.random.default_rng([config.seed, step])
            chosen = rng.choice(len(prompts), size=config.prompts_per_step, replace=len(prompts) < config.prompts_per_step)
            # same arithmetic as the loss evaluation, so first-epoch ratios are exactly one
            with torch.no_grad():
                snapshot = policy().clone()
            groups = []
            for slot, pi in enumerate(chosen):
                seeds = [[config.seed, step, slot, j] for j in range(config.group_size)]
                try:
                    grp = rollout_group(snapshot, prompts[int(pi)], config, seeds, judge)
                except JudgeError as exc:
                    log.warning("step %d: group for prompt %s skipped: %s", step, prompts[int(pi)].id, exc)
                    continue
                groups.append(grp)
                if reward_log is not None:
                    for j, b in enumerate(grp.breakdowns):
                        reward_log.log_reward(step, grp.prompt_id, j, b, getattr(judge, "kind", "unknown"),
                                              advantage=float(grp.advantages[j]))
            loss_value, stats_acc = 0.0, []
            if groups:
                for _ in range(config.inner_epochs):
                    opt.zero_grad(set_to_none=True)
                    try:
                        for grp in groups:
                            lv, st = msgrpo_loss(grp, policy, ref_params, config, backward=True)
                            loss_value += float(lv) / (len(groups) * config.inner_epochs)
                            stats_acc.append(st)
                    except FloatingPointError as exc:
                        log.warning("step %d aborted, params kept: %s", step, exc)
                        opt.zero_grad(set_to_none=True)
                        break
                    for tensor in trainable:
                        if tensor.grad is not None:
                            tensor.grad /= len(groups)
                    opt.step()
            rewards = np.concatenate([g.rewards for g in groups]) if groups else None
            advs = np.concatenate([g.advantages for g in groups]) if groups else None
            stat = lambda a, f: float(f(a)) if a is not None else None  # noqa: E731
            rec = {
                "step": step,
                "phase": phase,
                "mean_reward": stat(rewards, np.mean),
                "reward_std": stat(rewards, np.std),
                "adv_mean": stat(advs, np.mean),
                "adv_std": stat(advs, np.std),
                "clip_fraction": float(np.mean([s["clip_fraction"] for s in stats_acc])) if stats_acc else 0.0,
                "mean_kl": float(np.mean([s["mean_kl"] for s in stats_acc])) if stats_acc else 0.0,
                "max_abs_log_ratio": max((s["max_abs_log_ratio"] for s in stats_acc), default=0.0),
                "loss": loss_value,
                "groups": len(groups),
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            metrics.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
                metrics_file.flush()
            if on_metrics is not None:
                on_metrics(rec)
            log.info("rl step %d [%s] reward %s clip %.3f", step, phase, rec["mean_reward"], rec["clip_fraction"])
    finally:
        if metrics_file is not None:
            metrics_file.close()
    with torch.no_grad():
        final = merge_adapter(base, adapter) if adapter is not None else base.clone()
    if out is not None:
        checkpoints.append(save_checkpoint(out / "rl_final.ckpt", final, total_steps))
    return final, checkpoints, metrics

