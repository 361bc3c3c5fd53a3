"""Flow-matching supervised fine-tuning.

Data sits at t=1 and noise at t=0: ``x_t = t * x0 + (1 - t) * x1`` with
velocity target ``x0 - x1``. The training loop packs every sample's
references under the pixel budget of the current curriculum stage and
regresses the velocity on the target slice of the packed sequence.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import ModelParams, collate, forward_batch, with_target
from .checkpoint import save_checkpoint
from .instructions import Instruction
from .packing import DEFAULT_SCHEDULE, BudgetSchedule, PackedSequence, budget_at, pack_condition, patchify
from .rasters import RasterImage, encode

log = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


@dataclass
class TrainingSample:
    references: list[RasterImage]
    instruction: Instruction
    target: RasterImage
    kind: str = "compose"
    id: str = ""

    def __post_init__(self) -> None:
        self.instruction.check_refs(len(self.references))


@dataclass
class SftConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 200
    seed: int = 0
    schedule: BudgetSchedule = DEFAULT_SCHEDULE
    t_location: float = 0.0
    t_scale: float = 1.0
    patch_pixels: int = 4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self) -> None:
        for name in ("batch_size", "patch_pixels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("steps and warmup_steps must be non-negative")
        if self.lr <= 0 or self.t_scale <= 0:
            raise ValueError("lr and t_scale must be positive")


def sample_timestep(rng: np.random.Generator, location: float = 0.0, scale: float = 1.0) -> float:
    """Logit-normal draw, strictly inside (0, 1)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    z = location + scale * rng.standard_normal()
    # numerically stable logistic
    t = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return float(min(max(t, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0)))


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x0, x1, t):
    _check_shapes(x0, x1)
    return t * x0 + (1 - t) * x1


def velocity_target(x0, x1):
    _check_shapes(x0, x1)
    return x0 - x1


def sft_loss(predicted_v, x0, x1):
    _check_shapes(predicted_v, x0)
    _check_shapes(x0, x1)
    for name, a in (("predicted_v", predicted_v), ("x0", x0), ("x1", x1)):
        finite = torch.isfinite(a).all() if torch.is_tensor(a) else np.isfinite(a).all()
        if not finite:
            raise FloatingPointError(f"{name} has non-finite values")
    return ((predicted_v - velocity_target(x0, x1)) ** 2).mean()


def cosine_lr(step: int, total: int, peak: float, warmup: int) -> float:
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


class EncodedCache:
    """Packed references per (sample index, budget); encoding is deterministic."""

    def __init__(self, samples: Sequence[TrainingSample], patch_pixels: int):
        self.samples = samples
        self.patch_pixels = patch_pixels
        self._packs: dict[tuple[int, int], PackedSequence] = {}
        self._x0: dict[int, np.ndarray] = {}

    def get(self, index: int, budget: int) -> tuple[PackedSequence, np.ndarray]:
        key = (index, budget)
        if key not in self._packs:
            s = self.samples[index]
            pack, _ = pack_condition(s.references, s.target.size, budget, self.patch_pixels)
            self._packs[key] = pack
        if index not in self._x0:
            self._x0[index] = patchify(encode(self.samples[index].target, self.patch_pixels))[0]
        return self._packs[key], self._x0[index]


def sft_batch_loss(params: ModelParams, packs, x0s, instructions, noise_seeds, config: SftConfig) -> torch.Tensor:
    """Velocity MSE for one batch; ``noise_seeds`` fixes x1 and t per sample."""
    dtype = params.dtype
    x0 = torch.as_tensor(np.stack(x0s), dtype=dtype)
    x1s, ts = [], []
    for seed in noise_seeds:
        rng = np.random.default_rng(seed)
        ts.append(sample_timestep(rng, config.t_location, config.t_scale))
        x1s.append(rng.standard_normal(x0.shape[1:]))
    x1 = torch.as_tensor(np.stack(x1s), dtype=dtype)
    t = torch.as_tensor(ts, dtype=dtype)
    xt = interpolate(x0, x1, t[:, None, None])
    batch = collate(packs, instructions, params.config, dtype=dtype)
    batch = with_target(batch, xt)
    v = forward_batch(params, batch, t)
    return sft_loss(v, x0, x1)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


def train_sft(config: SftConfig, dataset: Sequence[TrainingSample], params: ModelParams,
              out_dir: str | Path | None = None,
              on_metrics: Callable[[dict], None] | None = None):
    """Run SFT; returns ``(params, checkpoint_paths, metrics)``.

    Deterministic under a fixed seed: batch indices, timesteps and noise are
    all derived from ``(seed, step, slot)``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    params.check()
    params = params.clone()
    leaves = list(params.arrays.values())
    for a in leaves:
        a.requires_grad_(True)
    opt = torch.optim.AdamW(leaves, lr=config.lr, betas=config.betas, eps=config.eps,
                            weight_decay=config.weight_decay)
    cache = EncodedCache(dataset, config.patch_pixels)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_file = (out / "sft_metrics.jsonl").open("w") if out is not None else None
    checkpoints: list[Path] = []
    metrics: list[dict] = []
    n = len(dataset)
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            budget = budget_at(config.schedule, step)
            rng = np.random.default_rng([config.seed, step])
            idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
            items = [cache.get(int(i), budget) for i in idx]
            lr = cosine_lr(step, config.steps, config.lr, config.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                loss = sft_batch_loss(
                    params, [p for p, _ in items], [x for _, x in items],
                    [dataset[int(i)].instruction for i in idx],
                    [[config.seed, step, slot] for slot in range(config.batch_size)], config,
                )
                if not torch.isfinite(loss):
                    raise FloatingPointError("loss is not finite")
            except FloatingPointError as exc:
                raise TrainingAborted(
                    f"non-finite loss at step {step} ({exc}); last good checkpoint: {_latest_checkpoint(checkpoints)}",
                    params.clone(), step,
                ) from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = {"step": step, "loss": float(loss.detach()), "lr": lr, "budget": budget,
                   "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
            metrics.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
                metrics_file.flush()
            if on_metrics is not None:
                on_metrics(rec)
            if step % 100 == 0:
                log.info("sft step %d loss %.5f lr %.2e budget %d", step, rec["loss"], lr, budget)
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 \
                    and step + 1 < config.steps:
                checkpoints.append(save_checkpoint(out / f"sft_step{step + 1}.ckpt", params, step + 1))
    finally:
        if metrics_file is not None:
            metrics_file.close()
    final = params.clone()
    if out is not None:
        checkpoints.append(save_checkpoint(out / "sft_final.ckpt", final, config.steps))
    return final, checkpoints, metrics


def _latest_checkpoint(paths):
    return str(paths[-1]) if paths else None
