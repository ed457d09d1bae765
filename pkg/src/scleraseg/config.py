"""Run configuration: defaults, an optional flat ``key = value`` file, and flag overrides.

Later sources win: command-line flags override the file, which overrides the
defaults below. The resolved view is written next to every output so that a
run can be repeated.
"""
from __future__ import annotations

import configparser
import dataclasses
import shlex
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

CONFIG_MAGIC = "# scleraseg run config v1"
ECHO_NAME = "run_config.cfg"

# per-axis expansion of the detected iris box (width, height)
DEFAULT_PADDING = (2.5, 2.0)
DEFAULT_RATIOS = (0.40, 0.20, 0.40)


@dataclass(frozen=True)
class RunConfig:
    # geometry and inference
    padding_x: float = DEFAULT_PADDING[0]
    padding_y: float = DEFAULT_PADDING[1]
    threshold: float = 0.5
    confidence_threshold: float = 0.25
    metrics_at: str = "original"
    # splits
    seed: int | None = None
    ratios: str = ",".join(f"{r:.2f}" for r in DEFAULT_RATIOS)
    # optimisation
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float | None = None
    lambda_l1: float = 100.0
    grad_clip: float | None = 10.0
    sclera_weight: float | None = None
    width_divisor: int = 1
    select_on: str = "f_score"
    deterministic: bool = True
    # execution
    workers: int = 1

    def __post_init__(self):
        if self.metrics_at not in ("original", "network"):
            raise ConfigError(f"metrics_at must be 'original' or 'network', not {self.metrics_at!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly between 0 and 1")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in [0, 1]")
        if self.padding_x <= 0 or self.padding_y <= 0:
            raise ConfigError("padding factors must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        self.ratio_tuple  # validates the format

    @property
    def padding(self) -> tuple[float, float]:
        return (self.padding_x, self.padding_y)

    @property
    def ratio_tuple(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(x) for x in self.ratios.split(","))
        except ValueError:
            raise ConfigError(f"ratios {self.ratios!r} are not comma-separated numbers") from None
        if len(parts) != 3:
            raise ConfigError(f"ratios {self.ratios!r} must have three values")
        return parts

    def to_text(self, command: str = "", argv: list[str] | None = None) -> str:
        lines = [CONFIG_MAGIC]
        if command:
            lines.append(f"# command: scleraseg {shlex.join([command, *(argv or [])])}")
        for f in fields(self):
            lines.append(f"{f.name} = {_render(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    typ = _TYPES[key]
    optional = "None" in typ
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if typ.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ.startswith("int"):
            return int(text)
        if typ.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None
    return text


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a flat ``key = value`` file (``#`` comments allowed)."""
    path = Path(path)
    try:
        body = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string("[run]\n" + body, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for key, raw in parser["run"].items():
        if key not in _TYPES:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(path: str | Path | None = None,
                   overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge defaults, the optional file and non-``None`` overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = _coerce(key, value)
    return dataclasses.replace(RunConfig(), **values)


def echo_config(cfg: RunConfig, where: str | Path, command: str = "",
                argv: list[str] | None = None) -> Path:
    """Write the resolved config into directory ``where`` or beside file ``where``."""
    where = Path(where)
    target = where / ECHO_NAME if where.is_dir() else where.with_name(where.name + ".cfg")
    target.write_text(cfg.to_text(command, argv), encoding="utf-8")
    return target
