"""Command line entry point: ``multiref <subcommand> [--config c.json] [--section.key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from ..backbone import ModelConfig, init_params
from ..checkpoint import load_checkpoint
from ..flowmatch import train_sft
from ..instructions import Instruction
from ..msgrpo import Prompt, train_rl
from ..rasters import read_png, write_png
from ..rewards import ProgrammaticJudge, RemoteJudge, serve_mock
from ..sampler import DETERMINISTIC, STOCHASTIC, sample
from ..taskgen import generate, read_dataset, write_dataset
from .config import ConfigError, OutputLock, apply_override, leaf_keys, load_config, to_rl_config, to_sft_config, \
    validate, write_resolved
from .evaluate import evaluate, format_table
from .plots import plot

log = logging.getLogger("multiref")

COMMANDS = ("gen-data", "train-sft", "train-rl", "sample", "eval", "plot", "judge-mock")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # report instead of exiting so main() owns the exit status
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multiref", description="Desk-scale multi-reference generation lab.",
                epilog="Any config leaf can be overridden as --section.key VALUE (JSON literals accepted).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", dest="out_dir", required=out_required, help="output directory (out_dir)")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    g.add_argument("--count", type=int)
    g.add_argument("--edit-fraction", type=float)
    g.add_argument("--k-min", type=int)
    g.add_argument("--k-max", type=int)

    s = common(sub.add_parser("train-sft", help="flow-matching supervised fine-tuning"))
    s.add_argument("--data", help="training dataset directory (data.train)")
    s.add_argument("--steps", type=int, help="sft.steps")

    r = common(sub.add_parser("train-rl", help="MSGRPO reinforcement learning from a checkpoint"))
    r.add_argument("--ckpt", help="starting checkpoint (init_checkpoint)")
    r.add_argument("--data", help="composition prompt dataset (data.composition)")
    r.add_argument("--steps", type=int, help="steps of the first phase")

    sm = common(sub.add_parser("sample", help="generate one image from references"))
    sm.add_argument("--ckpt", required=True)
    sm.add_argument("--refs", nargs="+", required=True)
    sm.add_argument("--instruction", required=True)
    sm.add_argument("--output", default=None, help="PNG path (default: <out>/sample.png)")
    sm.add_argument("--stochastic", action="store_true")
    sm.add_argument("--size", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"))
    e.add_argument("--ckpt", help="checkpoint (init_checkpoint)")
    e.add_argument("--data", help="evaluation dataset directory (data.eval)")

    pl = sub.add_parser("plot", help="SVG charts from metrics JSONL files")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--out", dest="out_dir", required=True)

    j = sub.add_parser("judge-mock", help="serve the judge protocol backed by the programmatic judge")
    j.add_argument("--host", default="127.0.0.1")
    j.add_argument("--port", type=int, default=8765)
    j.add_argument("--api-key", default=None)
    return p


def _split_overrides(extra: Sequence[str]) -> list[tuple[str, str]]:
    known = set(leaf_keys())
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if key not in known:
            raise UsageError(f"unknown flag --{key}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{key} needs a value")
            value = extra[i + 1]
            i += 1
        out.append((key, value))
        i += 1
    return out


def _resolve(args, extra, command: str) -> dict:
    overrides: list[tuple[str, object]] = []
    if getattr(args, "out_dir", None):
        overrides.append(("out_dir", args.out_dir))
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", args.seed))
    if command == "gen-data":
        for flag, key in (("count", "gen.count"), ("edit_fraction", "gen.edit_fraction"),
                          ("k_min", "gen.k_min"), ("k_max", "gen.k_max")):
            if getattr(args, flag) is not None:
                overrides.append((key, getattr(args, flag)))
    if command == "train-sft":
        if args.data:
            overrides.append(("data.train", args.data))
        if args.steps is not None:
            overrides.append(("sft.steps", args.steps))
    if command in ("train-rl", "eval") and args.ckpt:
        overrides.append(("init_checkpoint", args.ckpt))
    if command == "train-rl" and args.data:
        overrides.append(("data.composition", args.data))
    if command == "eval" and args.data:
        overrides.append(("data.eval", args.data))
    overrides += _split_overrides(extra)
    cfg = load_config(getattr(args, "config", None), [], None)
    for k, v in overrides:
        apply_override(cfg, k, v)
    if command == "train-rl" and args.steps is not None:
        cfg["rl"]["phases"][0]["steps"] = args.steps
    validate(cfg, command)
    return cfg


def make_judge(cfg: dict):
    j = cfg["judge"]
    if j["kind"] == "remote":
        return RemoteJudge(j["endpoint"], weights=j["weights"], max_attempts=j["max_attempts"],
                           base_delay=j["base_delay"], max_in_flight=j["max_in_flight"])
    return ProgrammaticJudge(j["weights"])


def _initial_params(cfg: dict):
    if cfg["init_checkpoint"]:
        params, _ = load_checkpoint(cfg["init_checkpoint"])
        return params
    return init_params(ModelConfig(**cfg["model"]), cfg["seed"])


def cmd_gen_data(cfg: dict) -> None:
    g = cfg["gen"]
    samples = generate(cfg["seed"], g["count"], g["edit_fraction"], (g["k_min"], g["k_max"]))
    write_dataset(samples, cfg["out_dir"], cfg["sft"]["patch_pixels"])
    print(f"wrote {len(samples)} samples to {cfg['out_dir']}")


def cmd_train_sft(cfg: dict) -> None:
    data = read_dataset(cfg["data"]["train"])
    params, ckpts, metrics = train_sft(to_sft_config(cfg), data, _initial_params(cfg), cfg["out_dir"])
    print(f"trained {len(metrics)} steps; final loss {metrics[-1]['loss']:.5f}" if metrics else "no steps run")
    print(f"checkpoint: {ckpts[-1]}")


def cmd_train_rl(cfg: dict) -> None:
    rl = to_rl_config(cfg)
    prompt_sets = {}
    for phase in ("composition", "editing"):
        path = cfg["data"][phase]
        if path:
            prompt_sets[phase] = [Prompt.from_sample(s) for s in read_dataset(path)]
    params, ckpts, metrics = train_rl(rl, prompt_sets, _initial_params(cfg), make_judge(cfg), cfg["out_dir"])
    if metrics:
        print(f"ran {len(metrics)} RL steps; last mean reward {metrics[-1]['mean_reward']}")
    print(f"checkpoint: {ckpts[-1]}")


def cmd_eval(cfg: dict) -> None:
    data = read_dataset(cfg["data"]["eval"])
    ev = cfg["eval"]
    if ev["limit"]:
        data = data[:ev["limit"]]
    report = evaluate(_initial_params(cfg), data, make_judge(cfg), steps=ev["steps"], stochastic=ev["stochastic"],
                      noise_level=ev["noise_level"], seed=cfg["seed"], budget=ev["budget"],
                      patch_pixels=cfg["sft"]["patch_pixels"])
    report.write(cfg["out_dir"])
    print(format_table(report))


def cmd_sample(cfg: dict, args) -> None:
    params, _ = load_checkpoint(args.ckpt)
    refs = [read_png(p) for p in args.refs]
    instruction = Instruction.from_text(args.instruction)
    instruction.check_refs(len(refs))
    ev = cfg["eval"]
    image, _ = sample(params, refs, instruction, steps=ev["steps"],
                      mode=STOCHASTIC if args.stochastic else DETERMINISTIC,
                      rng=np.random.default_rng(cfg["seed"]), a=ev["noise_level"], target_size=tuple(args.size),
                      budget=ev["budget"], patch_pixels=cfg["sft"]["patch_pixels"])
    out = Path(args.output) if args.output else Path(cfg["out_dir"]) / "sample.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(image, out)
    print(f"wrote {out}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "plot":
            if extra:
                raise UsageError(f"unexpected arguments {extra}")
            written = plot(args.metrics, args.out_dir)
            for w in written:
                print(w)
            return 0
        if args.command == "judge-mock":
            if extra:
                raise UsageError(f"unexpected arguments {extra}")
            serve_mock(args.host, args.port, args.api_key)
            return 0
        cfg = _resolve(args, extra, args.command)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(cfg["out_dir"]) if args.command != "sample" or not args.output else Path(args.output).parent
    try:
        with OutputLock(out_dir):
            write_resolved(cfg, out_dir)
            if args.command == "gen-data":
                cmd_gen_data(cfg)
            elif args.command == "train-sft":
                cmd_train_sft(cfg)
            elif args.command == "train-rl":
                cmd_train_rl(cfg)
            elif args.command == "eval":
                cmd_eval(cfg)
            elif args.command == "sample":
                cmd_sample(cfg, args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - one-line cause for the shell
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
