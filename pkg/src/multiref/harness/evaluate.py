"""Evaluation reports: per-sample rows plus aggregates split by reference count and task kind."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..backbone import ModelParams
from ..flowmatch import TrainingSample
from ..packing import pack_condition
from ..rasters import RasterImage
from ..rewards import ProgrammaticJudge
from ..sampler import DETERMINISTIC, STOCHASTIC, latent_to_image, sample_many

log = logging.getLogger(__name__)

METRICS = ("mse", "recall", "integration", "consistency", "quality", "reward")


@dataclass
class EvalRow:
    id: str
    kind: str
    k: int
    mse: float | None = None          # mean squared pixel error, pixels scaled to [0, 1]
    recall: float | None = None       # None when the instruction expects no visible element
    integration: float | None = None
    consistency: float | None = None
    quality: float | None = None
    reward: float | None = None
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "aggregates": self.aggregates}

    def write(self, directory: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        jpath, tpath = d / f"{stem}_report.json", d / f"{stem}_report.txt"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        tpath.write_text(format_table(self) + "\n")
        return jpath, tpath

    @property
    def mean_reward(self) -> float:
        return self.aggregates["overall"]["reward"]

    @property
    def recall(self) -> float:
        return self.aggregates["overall"]["recall"]


def _mean(rows: Sequence[EvalRow], name: str) -> float | None:
    vals = [getattr(r, name) for r in rows if getattr(r, name) is not None]
    return float(np.mean(vals)) if vals else None


def _summary(rows: Sequence[EvalRow]) -> dict:
    out = {m: _mean(rows, m) for m in METRICS}
    out["count"] = len(rows)
    out["errors"] = sum(r.error is not None for r in rows)
    return out


def aggregate(rows: Sequence[EvalRow]) -> dict:
    ks = sorted({r.k for r in rows})
    kinds = sorted({r.kind for r in rows})
    return {
        "overall": _summary(rows),
        "by_k": {str(k): _summary([r for r in rows if r.k == k]) for k in ks},
        "by_kind": {kind: _summary([r for r in rows if r.kind == kind]) for kind in kinds},
    }


def score_images(samples: Sequence[TrainingSample], images: Sequence[RasterImage | None], judge,
                 errors: Sequence[str | None] | None = None) -> EvalReport:
    """Score given candidates (model outputs, or targets for an oracle ceiling)."""
    detector = judge if hasattr(judge, "detected") else ProgrammaticJudge()
    rows = []
    for i, (s, im) in enumerate(zip(samples, images)):
        row = EvalRow(id=s.id, kind=s.kind, k=len(s.references))
        if errors is not None and errors[i] is not None:
            row.error = errors[i]
        if im is None:
            row.error = row.error or "no candidate"
            rows.append(row)
            continue
        try:
            diff = (im.pixels.astype(float) - s.target.pixels.astype(float)) / 255.0
            row.mse = float(np.mean(diff * diff))
            found, expected = detector.detected(s.references, s.instruction, im)
            row.recall = found / expected if expected else None
            b = judge(s.references, s.instruction, im)
            row.integration, row.consistency, row.quality, row.reward = (
                b.integration, b.consistency, b.quality, b.total)
        except Exception as exc:  # noqa: BLE001 - recorded per sample
            log.warning("evaluation of %s failed: %s", s.id, exc)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return EvalReport(rows, aggregate(rows))


def generate_images(params: ModelParams, samples: Sequence[TrainingSample], steps: int = 25,
                    stochastic: bool = False, noise_level: float = 1.5, seed: int = 0,
                    budget: int = 64 * 64, patch_pixels: int = 4, batch_size: int = 16):
    """Sample one output per prompt; returns (images, errors). Sample i uses rng ``[seed, i]``."""
    images: list[RasterImage | None] = [None] * len(samples)
    errors: list[str | None] = [None] * len(samples)
    mode = STOCHASTIC if stochastic else DETERMINISTIC
    prepared = []
    for i, s in enumerate(samples):
        try:
            prepared.append((i, *pack_condition(s.references, s.target.size, budget, patch_pixels)))
        except Exception as exc:  # noqa: BLE001 - recorded per sample
            errors[i] = f"{type(exc).__name__}: {exc}"
    # batches must share a target length
    by_len: dict[int, list] = {}
    for item in prepared:
        by_len.setdefault(item[1].target_len, []).append(item)
    for group in by_len.values():
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            try:
                trajs = sample_many(params, [p for _, p, _ in chunk], [samples[i].instruction for i, _, _ in chunk],
                                    [np.random.default_rng([seed, i]) for i, _, _ in chunk], steps, mode, noise_level)
            except Exception as exc:  # noqa: BLE001 - recorded per sample
                for i, _, _ in chunk:
                    errors[i] = f"{type(exc).__name__}: {exc}"
                continue
            for (i, _, grid), tr in zip(chunk, trajs):
                images[i] = latent_to_image(tr.final, grid, patch_pixels)
    return images, errors


def evaluate(params: ModelParams, dataset: Sequence[TrainingSample], judge, weights=None, steps: int = 25,
             stochastic: bool = False, noise_level: float = 1.5, seed: int = 0, budget: int = 64 * 64,
             patch_pixels: int = 4, return_images: bool = False):
    """Sample every prompt (ODE by default) and score it against its target."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    if weights is not None:
        judge = ProgrammaticJudge(weights) if getattr(judge, "kind", "") == "programmatic" else judge
    images, errors = generate_images(params, dataset, steps, stochastic, noise_level, seed, budget, patch_pixels)
    report = score_images(dataset, images, judge, errors)
    return (report, images) if return_images else report


def format_table(report: EvalReport) -> str:
    header = f"{'split':<18}{'n':>5}{'err':>5}" + "".join(f"{m:>13}" for m in METRICS)

    def line(name: str, s: dict) -> str:
        cells = "".join(f"{'-':>13}" if s[m] is None else f"{s[m]:>13.4f}" for m in METRICS)
        return f"{name:<18}{s['count']:>5}{s['errors']:>5}{cells}"

    agg = report.aggregates
    lines = [header, line("overall", agg["overall"])]
    lines += [line(f"K={k}", s) for k, s in agg["by_k"].items()]
    lines += [line(f"kind={k}", s) for k, s in agg["by_kind"].items()]
    return "\n".join(lines)
