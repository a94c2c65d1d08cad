"""Experiment configuration: one sectioned key-value file drives a whole run.

Example::

    [run]
    seed = 7
    subset = EDF-20

    [augment]
    n_min = 2
    n_max = 8

    [pretrain]
    total_steps = 2000

Values given on the command line (``--set pretrain.base_lr=0.05``) override
the file; ``MVITIME_DATA_DIR`` / ``MVITIME_OUT_DIR`` override the paths.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .model import PRESETS, ModelConfig
from .seeding import subseed
from .train import TrainConfig

_TRAIN_KEYS = {
    "batch": None,  # maps onto pretrain_batch / finetune_batch
    "base_lr": float,
    "momentum": float,
    "weight_decay": float,
    "total_steps": int,
    "warmup_steps": int,
    "checkpoint_every": int,
    "max_steps": int,
}

_SCHEMA = {
    "run": {
        "seed": int, "deterministic": bool, "data_dir": str, "out_dir": str,
        "subset": str, "channel": str, "trim_min": int,
    },
    "model": {
        "preset": str, "input_length": int, "stem_channels": int, "head_channels": int,
        "projection_dim": int, "blocks": str,
    },
    "augment": {"n_min": int, "n_max": int, "seed": int},
    "contrastive": {"temperature": float, "pca_dim": int},
    "pretrain": _TRAIN_KEYS,
    "finetune": _TRAIN_KEYS,
    "combine": {"alpha": float, "mode": str},
    "eval": {"folds": int, "held_out": str, "eval_subjects": str, "pretrain_subjects": str},
}


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _split_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    data_dir: str = ""
    out_dir: str = "runs"
    subset: str = "EDF-20"
    channel: str = "EEG Fpz-Cz"
    trim_min: int = 30
    model: ModelConfig = field(default_factory=lambda: PRESETS["xs"](3000))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    temperature: float = 0.5
    pca_dim: int | None = None  # subject-feature length; defaults to the epoch length
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(base_lr=0.01))
    combine_alpha: float = 0.5
    combine_mode: str = "full"
    folds: int = 20
    held_out: tuple = ()
    eval_subjects: tuple = ()
    pretrain_subjects: tuple = ()

    @property
    def pca_components(self) -> int:
        dim = self.pca_dim or self.model.input_length
        if dim % self.model.input_length:
            raise ConfigError(
                f"contrastive.pca_dim={dim} must be a multiple of the epoch length {self.model.input_length}"
            )
        return dim // self.model.input_length

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"run-{self.digest()}"

    def validate_paths(self) -> None:
        if not self.data_dir or not Path(self.data_dir).is_dir():
            raise ConfigError(f"data directory {self.data_dir!r} does not exist")


def _coerce(section: str, key: str, raw: str):
    try:
        kind = _SCHEMA[section][key]
    except KeyError:
        raise ConfigError(f"unknown config key {section}.{key}") from None
    if kind is None:
        kind = int
    try:
        if kind is bool:
            return _parse_bool(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None


def read_values(path=None, overrides=()) -> dict:
    """Flat ``{"section.key": value}`` from a config file plus overrides."""
    values = {}
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                values[f"{section}.{key}"] = _coerce(section, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {item!r} is not section.key=value")
        section, key = dotted.strip().split(".", 1)
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[f"{section}.{key}"] = _coerce(section, key, raw)
    env = {"run.data_dir": "MVITIME_DATA_DIR", "run.out_dir": "MVITIME_OUT_DIR"}
    for dotted, var in env.items():
        if os.environ.get(var) and dotted not in {o.split("=", 1)[0].strip() for o in overrides}:
            values[dotted] = os.environ[var]
    return values


def _train_config(values: dict, section: str, seed: int, temperature: float, alpha: float,
                  defaults: TrainConfig) -> TrainConfig:
    kw = {}
    for key in _TRAIN_KEYS:
        dotted = f"{section}.{key}"
        if dotted in values:
            name = f"{section}_batch" if key == "batch" else key
            kw[name] = values[dotted]
    try:
        return dataclasses.replace(defaults, seed=subseed(seed, section), temperature=temperature,
                                   combine_alpha=alpha, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    v = read_values(path, overrides)
    get = v.get
    seed = get("run.seed", 0)

    preset = get("model.preset", "xs")
    if preset not in PRESETS:
        raise ConfigError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
    length = get("model.input_length", 3000)
    model = PRESETS[preset](length)
    changes = {k: get(f"model.{k}") for k in ("stem_channels", "head_channels", "projection_dim")
               if f"model.{k}" in v}
    if "model.blocks" in v:
        try:
            changes["blocks"] = tuple(json.loads(v["model.blocks"]))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model.blocks is not JSON: {exc}") from None
    try:
        model = dataclasses.replace(model, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model] {exc}") from None

    try:
        augment = AugmentConfig(get("augment.n_min", 2), get("augment.n_max", 8),
                                get("augment.seed", subseed(seed, "augment")))
    except ValueError as exc:
        raise ConfigError(f"[augment] {exc}") from None

    temperature = get("contrastive.temperature", 0.5)
    alpha = get("combine.alpha", 0.5)
    mode = get("combine.mode", "full")
    if mode not in ("features", "full"):
        raise ConfigError(f"combine.mode must be 'features' or 'full', got {mode!r}")
    if not 0 <= alpha <= 1:
        raise ConfigError(f"combine.alpha must lie in [0, 1], got {alpha}")
    if temperature <= 0:
        raise ConfigError("contrastive.temperature must be > 0")

    cfg = RunConfig(
        seed=seed,
        deterministic=get("run.deterministic", True),
        data_dir=get("run.data_dir", ""),
        out_dir=get("run.out_dir", "runs"),
        subset=get("run.subset", "EDF-20"),
        channel=get("run.channel", "EEG Fpz-Cz"),
        trim_min=get("run.trim_min", 30),
        model=model,
        augment=augment,
        temperature=temperature,
        pca_dim=get("contrastive.pca_dim"),
        pretrain=_train_config(v, "pretrain", seed, temperature, alpha, TrainConfig()),
        finetune=_train_config(v, "finetune", seed, temperature, alpha, TrainConfig(base_lr=0.01)),
        combine_alpha=alpha,
        combine_mode=mode,
        folds=get("eval.folds", 20),
        held_out=tuple(_split_list(get("eval.held_out", ""))),
        eval_subjects=tuple(_split_list(get("eval.eval_subjects", ""))),
        pretrain_subjects=tuple(_split_list(get("eval.pretrain_subjects", ""))),
    )
    cfg.pca_components  # validates pca_dim
    return cfg
