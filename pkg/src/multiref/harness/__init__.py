"""Operational shell: configuration, evaluation, charts and the command line."""

from .config import ConfigError, default_config, load_config
from .evaluate import EvalReport, EvalRow, evaluate, score_images
from .plots import plot

__all__ = ["ConfigError", "EvalReport", "EvalRow", "default_config", "evaluate", "load_config", "plot",
           "score_images"]
