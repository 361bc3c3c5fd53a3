"""SVG training charts. Output is byte-stable for a fixed input."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

# fixed hash salt and no date metadata keep the SVG text identical run to run
plt.rcParams["svg.hashsalt"] = "multiref"
plt.rcParams["svg.fonttype"] = "none"
_SVG_META = {"Date": None, "Creator": None}


class MetricsFormatError(ValueError):
    pass


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MetricsFormatError(f"{path}:{n}: malformed JSON line ({exc.msg})") from None
        if not isinstance(rec, dict) or "step" not in rec:
            raise MetricsFormatError(f"{path}:{n}: record has no 'step'")
        out.append(rec)
    return out


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def sft_chart(records: Sequence[dict], path: Path, window: int = 100) -> Path:
    steps = [r["step"] for r in records]
    loss = [r["loss"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, loss, lw=0.6, alpha=0.4, label="loss")
    if len(loss) >= window:
        ma = [sum(loss[i - window + 1:i + 1]) / window for i in range(window - 1, len(loss))]
        ax.plot(steps[window - 1:], ma, lw=1.2, label=f"{window}-step mean")
    # budget stage markers: first step at each new budget
    prev = None
    for r in records:
        if r.get("budget") != prev:
            ax.axvline(r["step"], color="gray", ls="--", lw=0.8)
            ax.annotate(f"budget {r.get('budget')}", (r["step"], 1), xycoords=("data", "axes fraction"),
                        fontsize=7, rotation=90, va="top")
            prev = r.get("budget")
    ax.set_xlabel("step")
    ax.set_ylabel("flow-matching loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right")
    return _save(fig, path)


def _phase_bounds(records: Sequence[dict]) -> list[tuple[int, str]]:
    out, prev = [], None
    for r in records:
        if r.get("phase") != prev:
            out.append((r["step"], r.get("phase")))
            prev = r.get("phase")
    return out


def rl_reward_chart(records: Sequence[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for phase in dict.fromkeys(r.get("phase") for r in records):
        rs = [r for r in records if r.get("phase") == phase]
        ax.plot([r["step"] for r in rs], [r["mean_reward"] for r in rs], lw=1.0, label=str(phase))
    for step, phase in _phase_bounds(records)[1:]:
        ax.axvline(step, color="gray", ls="--", lw=0.8)
        ax.annotate(f"phase: {phase}", (step, 1), xycoords=("data", "axes fraction"), fontsize=7,
                    rotation=90, va="top")
    ax.set_xlabel("step")
    ax.set_ylabel("mean group reward")
    ax.legend(loc="lower right")
    return _save(fig, path)


def rl_diagnostics_chart(records: Sequence[dict], path: Path) -> Path:
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    steps = [r["step"] for r in records]
    a1.plot(steps, [r["clip_fraction"] for r in records], lw=1.0)
    a1.set_ylabel("clip fraction")
    a2.plot(steps, [r["mean_kl"] for r in records], lw=1.0)
    a2.set_ylabel("mean KL")
    a2.set_xlabel("step")
    for step, _ in _phase_bounds(records)[1:]:
        for ax in (a1, a2):
            ax.axvline(step, color="gray", ls="--", lw=0.8)
    return _save(fig, path)


def plot(metrics_files: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Charts for every SFT or RL metrics file given; kind is inferred from the record fields."""
    out = Path(out_dir)
    written: list[Path] = []
    for f in metrics_files:
        records = read_jsonl(f)
        if not records:
            log.warning("%s has no records; nothing to plot", f)
            continue
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(f).stem
        if "mean_reward" in records[0]:
            written.append(rl_reward_chart(records, out / f"{stem}_reward.svg"))
            written.append(rl_diagnostics_chart(records, out / f"{stem}_clip_kl.svg"))
        elif "loss" in records[0]:
            written.append(sft_chart(records, out / f"{stem}_loss.svg"))
        else:
            raise MetricsFormatError(f"{f}: records are neither SFT nor RL metrics")
    if not written:
        log.warning("no charts written")
    return written
