"""Euler (ODE) and Euler-Maruyama (SDE) samplers.

Time runs forward from noise at t=0 to data at t=1 on the grid
``t_i = i / T``. The stochastic update is

    x' = x + [v + sigma^2 / (2 t) * (x + (1 - t) v)] dt + sigma * sqrt(dt) * n

with ``sigma_t = a * sqrt(t (1 - t))``. The same ``eps_t`` clamp on ``t`` is
used by the drift, the transition density and the closed-form KL so that
the sampling policy and its density never disagree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backbone import ModelParams, collate, expand, forward_batch, with_target
from .instructions import Instruction
from .packing import PackedSequence, pack_condition, unpatchify
from .rasters import RasterImage, decode

EPS_T = 1e-4
DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"


class SamplerError(ValueError):
    pass


def _finite(*arrays) -> None:
    for a in arrays:
        ok = torch.isfinite(a).all() if torch.is_tensor(a) else np.all(np.isfinite(a))
        if not ok:
            raise FloatingPointError("non-finite input to sampler arithmetic")


def sigma_at(t: float, a: float) -> float:
    if a < 0:
        raise SamplerError("noise level a must be >= 0")
    t = min(max(float(t), 0.0), 1.0)
    return a * math.sqrt(t * (1.0 - t))


def drift(x, v, t: float, sigma: float, eps_t: float = EPS_T):
    if eps_t <= 0:
        raise SamplerError("eps_t must be positive")
    _finite(x, v)
    if sigma == 0:
        return v + 0.0 * x
    return v + (sigma * sigma / (2.0 * max(t, eps_t))) * (x + (1.0 - t) * v)


def step_mean(x, v, t: float, dt: float, sigma: float, eps_t: float = EPS_T):
    return x + drift(x, v, t, sigma, eps_t) * dt


def sde_step(x, v, t: float, dt: float, sigma: float, noise, eps_t: float = EPS_T):
    if dt <= 0:
        raise SamplerError("dt must be positive")
    if tuple(np.shape(noise)) != tuple(np.shape(x)):
        raise SamplerError("noise must be shaped like x")
    out = step_mean(x, v, t, dt, sigma, eps_t) + sigma * math.sqrt(dt) * noise
    _finite(out)
    return out


def _sum_tail(a, batch_dims: int):
    dims = tuple(range(batch_dims, a.ndim))
    if torch.is_tensor(a):
        return a.sum(dim=dims) if dims else a
    return a.sum(axis=dims) if dims else a


def transition_logpdf(x_next, x, v, t: float, dt: float, sigma: float, eps_t: float = EPS_T, batch_dims: int = 0):
    """Gaussian log-density of one stochastic step, summed over non-batch dims."""
    std = sigma * math.sqrt(dt)
    if not std > 0:
        raise SamplerError("transition density needs sigma * sqrt(dt) > 0; skip deterministic steps")
    mean = step_mean(x, v, t, dt, sigma, eps_t)
    z = (x_next - mean) / std
    d = int(np.prod(np.shape(x_next)[batch_dims:]))
    return -0.5 * _sum_tail(z * z, batch_dims) - 0.5 * d * math.log(2.0 * math.pi * std * std)


@dataclass
class Trajectory:
    """One rollout. States and velocities are ``target_len x channels`` token arrays."""

    times: list[float]
    states: list[np.ndarray]
    velocities: list[np.ndarray] = field(default_factory=list)
    noises: list[np.ndarray] = field(default_factory=list)
    step_logpdfs: list[float] = field(default_factory=list)
    stochastic_steps: list[int] = field(default_factory=list)
    mode: str = DETERMINISTIC
    a: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return 1.0 / len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def time_grid(steps: int) -> list[float]:
    if steps < 1:
        raise SamplerError("need at least one step")
    return [i / steps for i in range(steps)]


def model_time(t: float) -> float:
    """Timestep fed to the backbone, kept inside (0, 1)."""
    return min(max(t, EPS_T), 1.0 - EPS_T)


def velocities(params: ModelParams, cond, states: torch.Tensor, t: float) -> torch.Tensor:
    """Backbone velocities (float64) for a batch of target states sharing one condition batch."""
    batch = with_target(cond, states.to(params.dtype))
    return forward_batch(params, batch, model_time(t)).to(torch.float64)


def sample_many(params: ModelParams, packs: Sequence[PackedSequence], instructions: Sequence[Instruction],
                rngs: Sequence[np.random.Generator], steps: int = 25, mode: str = DETERMINISTIC,
                a: float = 1.5) -> list[Trajectory]:
    """Integrate one trajectory per (pack, instruction, rng), batched through the backbone.

    Every trajectory consumes only its own rng, so results do not depend on
    how samples are grouped into batches.
    """
    if mode not in (DETERMINISTIC, STOCHASTIC):
        raise SamplerError(f"unknown mode {mode!r}")
    times = time_grid(steps)
    dt = 1.0 / steps
    n = len(packs)
    shape = (packs[0].target_len, packs[0].channels)
    cond = collate(list(packs), list(instructions), params.config, dtype=params.dtype)
    x = torch.as_tensor(np.stack([rng.standard_normal(shape) for rng in rngs]), dtype=torch.float64)
    trajs = [Trajectory(times=list(times), states=[x[i].numpy().copy()], mode=mode,
                        a=a if mode == STOCHASTIC else 0.0) for i in range(n)]
    with torch.no_grad():
        for i, t in enumerate(times):
            v = velocities(params, cond, x, t)
            sigma = sigma_at(t, a) if mode == STOCHASTIC else 0.0
            if sigma > 0:
                noise = torch.as_tensor(np.stack([rng.standard_normal(shape) for rng in rngs]))
                x_next = sde_step(x, v, t, dt, sigma, noise)
                lp = transition_logpdf(x_next, x, v, t, dt, sigma, batch_dims=1)
            else:
                noise = torch.zeros_like(x)
                x_next = x + v * dt
                lp = None
            for j, tr in enumerate(trajs):
                tr.velocities.append(v[j].numpy().copy())
                tr.noises.append(noise[j].numpy().copy())
                if lp is not None:
                    tr.step_logpdfs.append(float(lp[j]))
                    tr.stochastic_steps.append(i)
                tr.states.append(x_next[j].numpy().copy())
            x = x_next
    return trajs


def latent_to_image(tokens: np.ndarray, grid: tuple[int, int], patch_pixels: int) -> RasterImage:
    rows, cols = grid
    idx = np.arange(rows * cols)
    return decode(unpatchify(tokens, np.stack([idx // cols, idx % cols], axis=1), rows, cols), patch_pixels)


def sample(params: ModelParams, references: Sequence[RasterImage], instruction: Instruction, steps: int = 25,
           mode: str = DETERMINISTIC, rng: np.random.Generator | None = None, a: float = 1.5,
           target_size: tuple[int, int] = (32, 32), budget: int = 64 * 64,
           patch_pixels: int = 4) -> tuple[RasterImage, Trajectory]:
    rng = rng if rng is not None else np.random.default_rng(0)
    pack, grid = pack_condition(references, target_size, budget, patch_pixels)
    traj = sample_many(params, [pack], [instruction], [rng], steps, mode, a)[0]
    return latent_to_image(traj.final, grid, patch_pixels), traj


def group_condition(params: ModelParams, pack: PackedSequence, instruction: Instruction, group: int):
    """Collated condition for one prompt repeated ``group`` times."""
    return expand(collate([pack], [instruction], params.config, dtype=params.dtype), group)
