"""Run configuration: defaults, JSON schema, dotted overrides and output-directory provenance."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Iterable

import jsonschema

from ..backbone import ModelConfig
from ..flowmatch import SftConfig
from ..msgrpo import RlConfig
from ..packing import BudgetSchedule

RESOLVED_NAME = "resolved_config.json"
LOCK_NAME = ".lock"


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    sft, rl, model = SftConfig(), RlConfig(), ModelConfig()
    return {
        "seed": 0,
        "out_dir": "runs/default",
        "workers": 1,
        "data": {"train": None, "eval": None, "composition": None, "editing": None},
        "gen": {"count": 1000, "edit_fraction": 0.5, "k_min": 1, "k_max": 4},
        "model": model.to_dict(),
        "init_checkpoint": None,
        "sft": {
            "steps": sft.steps, "batch_size": sft.batch_size, "lr": sft.lr, "warmup_steps": sft.warmup_steps,
            "schedule": [list(s) for s in sft.schedule.stages], "t_location": sft.t_location,
            "t_scale": sft.t_scale, "patch_pixels": sft.patch_pixels, "betas": list(sft.betas), "eps": sft.eps,
            "weight_decay": sft.weight_decay, "checkpoint_every": sft.checkpoint_every,
        },
        "rl": {
            "group_size": rl.group_size, "steps_per_trajectory": rl.steps_per_trajectory,
            "noise_level": rl.noise_level, "beta": rl.beta, "clip_eps": rl.clip_eps, "lr": rl.lr,
            "betas": list(rl.betas), "eps": rl.eps, "weight_decay": rl.weight_decay,
            "adapter_rank": rl.adapter_rank, "adapter_alpha": rl.adapter_alpha,
            "full_parameter": rl.full_parameter, "phases": [{"name": n, "steps": s} for n, s in rl.phases],
            "prompts_per_step": rl.prompts_per_step, "inner_epochs": rl.inner_epochs,
            "resolution": rl.resolution, "budget": rl.budget, "adv_floor": rl.adv_floor,
        },
        "judge": {"kind": "programmatic", "weights": [1 / 3, 1 / 3, 1 / 3], "endpoint": None,
                  "max_attempts": 5, "base_delay": 1.0, "max_in_flight": 4},
        "eval": {"steps": 25, "stochastic": False, "noise_level": 1.5, "budget": 64 * 64, "limit": None},
    }


_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_PATH = {"type": ["string", "null"]}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}


def _obj(props: dict, required: Iterable[str] | None = None) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required if required is not None else props)}


SCHEMA: dict = _obj({
    "seed": _INT,
    "out_dir": {"type": "string", "minLength": 1},
    "workers": {"type": "integer", "minimum": 1, "maximum": 1},
    "data": _obj({"train": _PATH, "eval": _PATH, "composition": _PATH, "editing": _PATH}),
    "gen": _obj({"count": _NONNEG, "edit_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                 "k_min": {"type": "integer", "minimum": 1, "maximum": 4},
                 "k_max": {"type": "integer", "minimum": 1, "maximum": 4}}),
    "model": _obj({"layers": _POS, "width": _POS, "heads": _POS, "vocab": _POS, "channels": _POS,
                   "max_refs": _POS, "ff_mult": _POS, "rope_base": {"type": "number", "exclusiveMinimum": 0}}),
    "init_checkpoint": _PATH,
    "sft": _obj({
        "steps": _NONNEG, "batch_size": _POS, "lr": {"type": "number", "exclusiveMinimum": 0},
        "warmup_steps": _NONNEG,
        "schedule": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _INT,
                                                               "minItems": 2, "maxItems": 2}},
        "t_location": _NUM, "t_scale": {"type": "number", "exclusiveMinimum": 0}, "patch_pixels": _POS,
        "betas": _PAIR, "eps": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0}, "checkpoint_every": _NONNEG,
    }),
    "rl": _obj({
        "group_size": {"type": "integer", "minimum": 2}, "steps_per_trajectory": _POS,
        "noise_level": {"type": "number", "minimum": 0}, "beta": {"type": "number", "minimum": 0},
        "clip_eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0}, "betas": _PAIR,
        "eps": {"type": "number", "exclusiveMinimum": 0}, "weight_decay": {"type": "number", "minimum": 0},
        "adapter_rank": _POS, "adapter_alpha": {"type": "number", "exclusiveMinimum": 0},
        "full_parameter": {"type": "boolean"},
        "phases": {"type": "array", "minItems": 1, "items": _obj({
            "name": {"enum": ["composition", "editing"]}, "steps": _NONNEG})},
        "prompts_per_step": _POS, "inner_epochs": _POS, "resolution": _POS, "budget": _POS,
        "adv_floor": {"type": "number", "exclusiveMinimum": 0},
    }),
    "judge": _obj({
        "kind": {"enum": ["programmatic", "remote"]},
        "weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "endpoint": _PATH, "max_attempts": _POS, "base_delay": {"type": "number", "minimum": 0},
        "max_in_flight": _POS,
    }),
    "eval": _obj({"steps": _POS, "stochastic": {"type": "boolean"}, "noise_level": {"type": "number", "minimum": 0},
                  "budget": _POS, "limit": {"type": ["integer", "null"], "minimum": 1}}),
})

# Paths each subcommand cannot run without.
REQUIRED_PATHS = {
    "train-sft": ["data.train"],
    "train-rl": ["init_checkpoint", "data.composition"],
    "eval": ["data.eval"],
}


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        if i == len(parts) - 1:
            node[part] = _parse_value(value) if isinstance(value, str) else value
        else:
            node = node[part]


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Deep merge; keys missing from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in out:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, prefix + k + ".")
        else:
            out[k] = v
    return out


def validate(cfg: dict, command: str | None = None) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    if cfg["gen"]["k_min"] > cfg["gen"]["k_max"]:
        raise ConfigError("config invalid at gen: k_min exceeds k_max")
    try:
        to_sft_config(cfg)
        to_rl_config(cfg)
        ModelConfig(**cfg["model"])
    except ValueError as exc:
        raise ConfigError(f"config invalid: {exc}") from None
    for path in REQUIRED_PATHS.get(command, []):
        if _get(cfg, path) is None:
            raise ConfigError(f"config invalid at {path}: required by {command} but not set")


def load_config(path: str | Path | None = None, overrides: Iterable[tuple[str, Any]] = (),
                command: str | None = None) -> dict:
    """Defaults, then the JSON file, then dotted overrides (flags win); validated."""
    cfg = default_config()
    if path is not None:
        try:
            cfg = merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    for key, value in overrides:
        apply_override(cfg, key, value)
    validate(cfg, command)
    return cfg


def leaf_keys(cfg: dict | None = None, prefix: str = "") -> list[str]:
    cfg = default_config() if cfg is None else cfg
    out = []
    for k, v in cfg.items():
        if isinstance(v, dict):
            out.extend(leaf_keys(v, prefix + k + "."))
        else:
            out.append(prefix + k)
    return out


def to_sft_config(cfg: dict) -> SftConfig:
    s = cfg["sft"]
    return SftConfig(
        steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"], warmup_steps=s["warmup_steps"],
        seed=cfg["seed"], schedule=BudgetSchedule(tuple(tuple(x) for x in s["schedule"])),
        t_location=s["t_location"], t_scale=s["t_scale"], patch_pixels=s["patch_pixels"],
        betas=tuple(s["betas"]), eps=s["eps"], weight_decay=s["weight_decay"],
        checkpoint_every=s["checkpoint_every"],
    )


def to_rl_config(cfg: dict) -> RlConfig:
    r = dict(cfg["rl"])
    r["phases"] = tuple((p["name"], p["steps"]) for p in r["phases"])
    r["betas"] = tuple(r["betas"])
    return RlConfig(**r, reward_weights=tuple(cfg["judge"]["weights"]), seed=cfg["seed"],
                    patch_pixels=cfg["sft"]["patch_pixels"])


class OutputLock:
    """Exclusive marker file so that at most one run writes to an output directory."""

    def __init__(self, directory: str | Path):
        self.path = Path(directory) / LOCK_NAME

    def __enter__(self) -> OutputLock:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc) -> None:
        self.path.unlink(missing_ok=True)


def write_resolved(cfg: dict, directory: str | Path) -> Path:
    path = Path(directory) / RESOLVED_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
