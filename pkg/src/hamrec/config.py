"""Run configuration: option table, ``key = value`` files and flag overrides.

Values are resolved as built-in default, then config file, then command-line
flag. Every key is validated before any command does work.
"""
from __future__ import annotations

import argparse
import os
from dataclasses import dataclass
from pathlib import Path

from .graph import SplitSpec
from .model import READOUTS, ModelConfig
from .trainer import TrainConfig

WORKERS_ENV = "HAMREC_WORKERS"


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return int(text)


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _default_workers():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or not raw.strip():
        return 1
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class Option:
    key: str
    type: object
    default: object
    help: str
    choices: tuple | None = None


_M, _T = ModelConfig(), TrainConfig()

OPTIONS = {o.key: o for o in [
    # data preparation
    Option("input", str, None, "interaction log to read"),
    Option("format", str, "tsv", "log layout", ("tsv", "udata")),
    Option("split", str, "leave-last-one", "hold-out policy", ("leave-last-one", "leave-random-k", "ratio")),
    Option("split_k", int, 1, "events held out per user for leave-random-k"),
    Option("split_ratio", float, 0.2, "fraction held out per user for ratio"),
    # paths
    Option("data", str, None, "prepared dataset directory"),
    Option("out", str, None, "output path"),
    Option("run", str, None, "training run directory"),
    Option("codes", str, None, "directory holding users.hsgc and items.hsgc"),
    Option("resume", str, None, "checkpoint to resume training from"),
    # model
    Option("K", int, _M.K, "code length in bits"),
    Option("L", int, _M.L, "number of propagation layers"),
    Option("self_weight", float, _M.self_weight, "weight of a node's own code in each layer"),
    Option("normalize_neighbors", _bool, _M.normalize_neighbors, "average neighbor codes instead of summing"),
    Option("readout", str, _M.readout, "final code readout", READOUTS),
    Option("beta0", float, _M.beta0, "initial tanh sharpness"),
    Option("beta_growth", float, _M.beta_growth, "sharpness growth factor"),
    Option("beta_period", int, _M.beta_period, "epochs between sharpness increases"),
    Option("beta_max", float, _M.beta_max, "sharpness cap"),
    Option("score_scale", float, _M.score_scale, "multiplier on normalized scores inside the ranking loss"),
    # training
    Option("epochs", int, _T.epochs, "training epochs"),
    Option("triples_per_epoch", _optional_int, _T.triples_per_epoch, "sampled triples per epoch (none: edge count)"),
    Option("batch_size", int, _T.batch_size, "triples per gradient step"),
    Option("lr", float, _T.lr, "Adam learning rate"),
    Option("reg", float, _T.reg, "L2 weight on the embeddings of each triple"),
    Option("eval_every", int, _T.eval_every, "epochs between validation evaluations"),
    Option("patience", int, _T.patience, "evaluations without improvement before stopping"),
    Option("eval_k", int, _T.eval_k, "cutoff of the validation recall"),
    Option("sampling", str, _T.sampling, "how triples pick users", ("edge", "user")),
    # evaluation and retrieval
    Option("ks", _int_list, (10, 20), "metric cutoffs"),
    Option("target", str, "test", "held-out events to score", ("test", "validation")),
    Option("user", str, None, "user token to retrieve for (default: every user)"),
    Option("k", int, 10, "results per query"),
    Option("bands", _optional_int, None, "band count for bucket probing (none: exact scan)"),
    Option("radius", int, 0, "per-band Hamming radius for probing"),
    Option("exclude_train", _bool, True, "drop a user's training items from results"),
    # benchmark
    Option("items", int, 100_000, "synthetic item count when no codes are given"),
    Option("queries", int, 1000, "number of benchmark queries"),
    Option("repeats", int, 3, "timing repetitions (best is kept)"),
    # shared
    Option("seed", int, 0, "seed from which every random stream is derived"),
    Option("workers", int, None, f"worker threads (default: ${WORKERS_ENV} or 1)"),
    Option("log_level", str, "warning", "logging verbosity", ("debug", "info", "warning", "error")),
]}


def parse_config_file(path, allowed) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _convert(opt: Option, value):
    if value is None:
        return None
    try:
        v = opt.type(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{opt.key}: {exc}") from None
    if opt.choices is not None and v not in opt.choices:
        raise ConfigError(f"{opt.key}: {v!r} is not one of {', '.join(opt.choices)}")
    return v


def add_options(parser: argparse.ArgumentParser, keys, required=()) -> None:
    """Register ``--key`` flags. Defaults are suppressed so only explicit flags override."""
    for key in keys:
        opt = OPTIONS[key]
        flag = "--" + key.replace("_", "-")
        default = "required" if key in required else opt.default
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        kw = dict(dest=key, default=argparse.SUPPRESS, help=f"{opt.help} (default: {default})")
        if opt.type is _bool:
            kw["metavar"] = "BOOL"
        elif opt.choices:
            kw["metavar"] = "{" + ",".join(opt.choices) + "}"
        parser.add_argument(flag, **kw)


def resolve(keys, flags: dict, config_path=None, required=()) -> dict:
    """Merge defaults, config file and flags for ``keys``, converting and checking each value."""
    allowed = set(keys)
    file_values = parse_config_file(config_path, allowed) if config_path else {}
    out = {}
    for key in keys:
        opt = OPTIONS[key]
        if key in flags:
            value = _convert(opt, flags[key])
        elif key in file_values:
            value = _convert(opt, file_values[key])
        else:
            value = opt.default
        if value is None and key in required:
            raise ConfigError(f"missing required setting {key!r}")
        out[key] = value
    if "workers" in out:
        if out["workers"] is None:
            out["workers"] = _default_workers()
        if out["workers"] < 1:
            raise ConfigError("workers must be >= 1")
    return out


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**{f: cfg[f] for f in ModelConfig.__dataclass_fields__})


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{f: cfg[f] for f in TrainConfig.__dataclass_fields__})


def split_spec(cfg: dict) -> SplitSpec:
    return SplitSpec(cfg["split"], cfg["seed"], cfg["split_k"], cfg["split_ratio"])


def format_config(cfg: dict) -> str:
    def show(v):
        if isinstance(v, tuple):
            return ",".join(map(str, v))
        return "none" if v is None else str(v)
    return "".join(f"{k} = {show(v)}\n" for k, v in cfg.items())
