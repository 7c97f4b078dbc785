"""Run configuration: an INI file with ``[model]``, ``[train]``, ``[data]`` and
``[run]`` sections. Missing keys take the defaults below; unknown keys are
errors.

Example::

    [model]
    d_model = 32
    n_layers = 1

    [train]
    batch_size = 64

    [data]
    appliance = kettle

    [run]
    seed = 3
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from eltnilm.errors import ConfigError
from eltnilm.model import ModelConfig
from eltnilm.training import TrainConfig


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    appliance: Optional[str] = None
    window_stride: int = 1
    eval_stride: int = 1


@dataclass
class RunSection:
    seed: int = 0
    deterministic: bool = True
    output_dir: Optional[str] = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def train_config(self) -> TrainConfig:
        """Training settings with the run's seed and deterministic flag applied."""
        d = self.train.to_dict()
        d.update(seed=self.run.seed, deterministic=self.run.deterministic)
        return TrainConfig(**d)


# keys of TrainConfig that live in [run]
_RUN_OWNED = {"seed", "deterministic"}
_SECTIONS = {
    "model": (ModelConfig, set()),
    "train": (TrainConfig, _RUN_OWNED),
    "data": (DataConfig, set()),
    "run": (RunSection, set()),
}


def _coerce(raw: str, default, name: str):
    text = raw.strip()
    if name == "conv_kernels":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in configparser.ConfigParser.BOOLEAN_STATES:
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        raise ValueError(f"not a boolean: {raw!r}")
    if text.lower() in ("", "none") and (default is None or name == "regressor_hidden"):
        return None
    if isinstance(default, int) or name == "regressor_hidden":
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _defaults(cls) -> dict:
    obj = cls()
    return {f.name: getattr(obj, f.name) for f in fields(cls)}


def parse_run_config(parser: configparser.ConfigParser) -> RunConfig:
    """Resolve a parsed INI into a :class:`RunConfig`, collecting every error."""
    errors = []
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            errors.append(f"unknown section [{section}]")
    for section, (cls, excluded) in _SECTIONS.items():
        defaults = {k: v for k, v in _defaults(cls).items() if k not in excluded}
        resolved = {}
        if parser.has_section(section):
            for key, raw in parser[section].items():
                if key not in defaults:
                    errors.append(f"[{section}] unknown key {key!r}")
                    continue
                try:
                    resolved[key] = _coerce(raw, defaults[key], key)
                except ValueError as exc:
                    errors.append(f"[{section}] {key}: {exc}")
        values[section] = resolved
    try:
        cfg = RunConfig(
            ModelConfig(**values["model"]),
            TrainConfig(**values["train"]),
            DataConfig(**values["data"]),
            RunSection(**values["run"]),
        )
    except (TypeError, ValueError) as exc:
        errors.append(str(exc))
        raise ConfigError("; ".join(errors), errors) from None
    errors.extend(f"[model] {e}" for e in cfg.model.errors())
    errors.extend(f"[train] {e}" for e in cfg.train.errors())
    if cfg.data.window_stride < 1:
        errors.append("[data] window_stride must be >= 1")
    if cfg.data.eval_stride < 1:
        errors.append("[data] eval_stride must be >= 1")
    if errors:
        raise ConfigError("; ".join(errors), errors)
    return cfg


def validate_config(path) -> RunConfig:
    """Load and validate a run config; an empty file yields all defaults.

    Raises :class:`ConfigError` whose ``errors`` lists every violation.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_run_config(parser)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_config(path, cfg: RunConfig) -> None:
    """Write the fully resolved config; reading it back gives the same RunConfig."""
    parser = configparser.ConfigParser()
    for section, (cls, excluded) in _SECTIONS.items():
        obj = getattr(cfg, section)
        parser[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(cls) if f.name not in excluded}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
