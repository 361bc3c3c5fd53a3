"""Sequence-extended latent fusion: pixel budgets, patchify, and packing.

A packed sequence is the noisy target's tokens followed by every reference's
tokens, ``[target; ref_1; ...; ref_K]``. Each token keeps its 2D cell
position and a segment id (0 for the target, k for reference k), so the same
backbone accepts any number of references.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rasters import Latent, RasterImage, encode, resize


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class BudgetSchedule:
    """Ordered (step_threshold, total_pixels) stages."""

    stages: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        stages = tuple((int(s), int(b)) for s, b in self.stages)
        if not stages:
            raise PackingError("a budget schedule needs at least one stage")
        for (s0, b0), (s1, b1) in zip(stages, stages[1:]):
            if s1 <= s0:
                raise PackingError("stage thresholds must be strictly increasing")
            if b1 <= b0:
                raise PackingError("stage budgets must be strictly increasing")
        if any(b <= 0 for _, b in stages):
            raise PackingError("budgets must be positive")
        object.__setattr__(self, "stages", stages)

    @property
    def thresholds(self) -> list[int]:
        return [s for s, _ in self.stages]


# Desk-scale analog of the 1024^2 -> 1536^2 -> 2048^2 curriculum.
DEFAULT_SCHEDULE = BudgetSchedule(((0, 64 * 64), (10_000, 96 * 96), (20_000, 128 * 128)))


def budget_at(schedule: BudgetSchedule, step: int) -> int:
    budget = schedule.stages[0][1]
    for threshold, b in schedule.stages:
        if step >= threshold:
            budget = b
    return budget


def _total(alloc) -> int:
    return sum(h * w for h, w in alloc)


def allocate_budget(sizes: Sequence[tuple[int, int]], budget: int, multiple: int = 4) -> list[tuple[int, int]]:
    """Scale every image by one common factor so the total pixel count fits ``budget``.

    The factor starts at ``sqrt(budget / sum(H*W))`` (which may upscale) and
    each side is floored to a multiple of ``multiple``, never below one cell.
    If the one-cell minimum pushes the total over budget, the largest smaller
    factor at which some side changes and the total fits is used instead.
    All rounding is done in exact integer arithmetic.
    """
    sizes = [(int(h), int(w)) for h, w in sizes]
    if not sizes:
        return []
    if multiple < 1:
        raise PackingError("multiple must be >= 1")
    if any(h <= 0 or w <= 0 for h, w in sizes):
        raise PackingError(f"image sizes must be positive, got {sizes}")
    if budget < len(sizes) * multiple * multiple:
        raise PackingError(
            f"budget {budget} cannot grant each of {len(sizes)} images one {multiple}x{multiple} cell"
        )
    area = _total(sizes)

    def side(extent: int) -> int:
        # floor(extent * sqrt(budget / area)) == isqrt(floor(extent^2 * budget / area))
        return max(1, math.isqrt(extent * extent * budget // area) // multiple) * multiple

    alloc = [(side(h), side(w)) for h, w in sizes]
    if _total(alloc) <= budget:
        return alloc
    # candidate factors s = k * multiple / extent below the initial one, largest first
    candidates = set()
    for h, w in sizes:
        for extent in (h, w):
            for k in range(1, side(extent) // multiple + 1):
                candidates.add(Fraction(k * multiple, extent))
    for s in sorted(candidates, reverse=True):
        alloc = [(max(1, math.floor(h * s / multiple)) * multiple, max(1, math.floor(w * s / multiple)) * multiple)
                 for h, w in sizes]
        if _total(alloc) <= budget:
            return alloc
    return [(multiple, multiple)] * len(sizes)


def fit_references(images: Sequence[RasterImage], budget: int, multiple: int = 4) -> list[RasterImage]:
    """Resize references (bilinear) to their budgeted sizes."""
    alloc = allocate_budget([im.size for im in images], budget, multiple)
    return [resize(im, h, w) for im, (h, w) in zip(images, alloc)]


def patchify(latent: Latent) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = latent.rows, latent.cols
    tokens = latent.values.reshape(rows * cols, latent.channels).copy()
    idx = np.arange(rows * cols)
    positions = np.stack([idx // cols, idx % cols], axis=1)
    return tokens, positions


def unpatchify(tokens: np.ndarray, positions: np.ndarray, rows: int, cols: int) -> Latent:
    tokens = np.asarray(tokens, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    if len(tokens) != len(positions):
        raise PackingError("tokens and positions differ in length")
    seen = np.zeros((rows, cols), dtype=bool)
    out = np.zeros((rows, cols, tokens.shape[1] if tokens.ndim == 2 else 0))
    for tok, (r, c) in zip(tokens, positions):
        if not (0 <= r < rows and 0 <= c < cols):
            raise PackingError(f"position ({r}, {c}) lies outside the {rows}x{cols} grid")
        if seen[r, c]:
            raise PackingError(f"duplicate position ({r}, {c})")
        seen[r, c] = True
        out[r, c] = tok
    if not seen.all():
        r, c = np.argwhere(~seen)[0]
        raise PackingError(f"missing position ({r}, {c})")
    return Latent(out)


@dataclass(frozen=True, eq=False)
class PackedSequence:
    tokens: np.ndarray     # N x channels
    positions: np.ndarray  # N x 2 (row, col)
    segments: np.ndarray   # N, 0 = target, k = reference k
    target_len: int

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def channels(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def num_refs(self) -> int:
        return int(self.segments.max()) if len(self.segments) else 0


def assemble(target, refs: Sequence = ()) -> PackedSequence:
    """Concatenate ``target`` then each reference; each part is ``(tokens, positions)``."""
    t_tokens, t_pos = (np.asarray(a) for a in target)
    channels = t_tokens.shape[1]
    tokens, positions, segments = [t_tokens], [t_pos], [np.zeros(len(t_tokens), dtype=np.int64)]
    for k, (r_tokens, r_pos) in enumerate(refs, start=1):
        r_tokens = np.asarray(r_tokens)
        if r_tokens.shape[1] != channels:
            raise PackingError(f"reference {k} has {r_tokens.shape[1]} channels, target has {channels}")
        tokens.append(r_tokens)
        positions.append(np.asarray(r_pos))
        segments.append(np.full(len(r_tokens), k, dtype=np.int64))
    return PackedSequence(
        tokens=np.concatenate(tokens).astype(np.float64),
        positions=np.concatenate(positions).astype(np.int64).reshape(-1, 2),
        segments=np.concatenate(segments),
        target_len=len(t_tokens),
    )


def slice_target(output_tokens, target_len: int):
    if len(output_tokens) < target_len:
        raise PackingError(f"output has {len(output_tokens)} rows, fewer than target_len={target_len}")
    return output_tokens[:target_len]


def pack_condition(references: Sequence[RasterImage], target_size: tuple[int, int], budget: int,
                   patch_pixels: int = 4) -> tuple[PackedSequence, tuple[int, int]]:
    """Budget-fit, encode and pack references behind a zero target placeholder.

    Returns the packed sequence and the target latent grid ``(rows, cols)``;
    callers overwrite the target rows with the current noisy state.
    """
    h, w = target_size
    if h % patch_pixels or w % patch_pixels:
        raise PackingError(f"target size {target_size} is not a multiple of patch_pixels={patch_pixels}")
    rows, cols = h // patch_pixels, w // patch_pixels
    parts = [patchify(encode(im, patch_pixels)) for im in fit_references(references, budget, patch_pixels)] \
        if references else []
    channels = 3 * patch_pixels * patch_pixels
    idx = np.arange(rows * cols)
    target = (np.zeros((rows * cols, channels)), np.stack([idx // cols, idx % cols], axis=1))
    return assemble(target, parts), (rows, cols)
