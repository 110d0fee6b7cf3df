"""Tool configuration merged from defaults, a key=value file, environment and flags."""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, fields
from typing import Any, Mapping

from .chunk_index import ChunkerConfig
from .engine import EngineConfig
from .errors import ReproError
from .labeler import LabelerConfig
from .prompting import PromptBudget

ENV_PREFIX = "REPOCTX_"
MAX_IN_FLIGHT = 8


class ConfigError(ReproError):
    pass


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, MAX_IN_FLIGHT))


@dataclass(frozen=True)
class ToolConfig:
    window: int = 10
    stride: int = 5
    top_k: int = 10
    query_window: int = 10
    t_c: float = 0.3
    t_p: float = 0.3
    t_n: float = 0.3
    max_prompt_tokens: int = 4096
    in_file_budget: int = 1024
    cross_file_budget: int = 3072
    t_pos: float = 0.10
    t_neg: float = -0.05
    signal_weight: float = 2.0
    max_generation_tokens: int = 128
    stop: str = ""
    keep_judged_inline: bool = False
    seed: int = 0
    workers: int = dataclasses.field(default_factory=default_workers)
    extensions: str = ".py"
    backend: str | None = None
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "REPOCTX_API_KEY"
    signal_mode: str = "top_logprobs"
    timeout: float = 60.0
    script: str | None = None
    replay: str | None = None
    oracle_gain: float = 0.5
    oracle_base_nll: float = 2.0
    oracle_conflict_penalty: float = 1.0

    def __post_init__(self):
        try:
            self.chunker
            self.labeler
            self.engine
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def chunker(self) -> ChunkerConfig:
        return ChunkerConfig(self.window, self.stride)

    @property
    def labeler(self) -> LabelerConfig:
        return LabelerConfig(self.t_pos, self.t_neg)

    @property
    def budget(self) -> PromptBudget:
        return PromptBudget(self.max_prompt_tokens, self.in_file_budget, self.cross_file_budget)

    @property
    def engine(self) -> EngineConfig:
        return EngineConfig(
            t_c=self.t_c, t_p=self.t_p, t_n=self.t_n,
            max_prompt_tokens=self.max_prompt_tokens, in_file_budget=self.in_file_budget,
            cross_file_budget=self.cross_file_budget, top_k=self.top_k, query_window=self.query_window,
            max_generation_tokens=self.max_generation_tokens, stop_sequences=self.stop_sequences,
            keep_judged_inline=self.keep_judged_inline,
        )

    @property
    def stop_sequences(self) -> tuple[str, ...]:
        """``stop`` holds a JSON list of strings so escapes like ``\\n`` survive a flat file."""
        if not self.stop:
            return ()
        try:
            seqs = json.loads(self.stop)
        except json.JSONDecodeError:
            raise ConfigError(f"stop must be a JSON list of strings, got {self.stop!r}") from None
        if not isinstance(seqs, list) or not all(isinstance(x, str) and x for x in seqs):
            raise ConfigError("stop must be a JSON list of non-empty strings")
        return tuple(seqs)

    @property
    def extension_list(self) -> tuple[str, ...]:
        return tuple(e.strip() for e in self.extensions.split(",") if e.strip())

    def to_lines(self) -> list[str]:
        return [f"{f.name} = {'' if getattr(self, f.name) is None else getattr(self, f.name)}" for f in fields(self)]


_FIELDS = {f.name: f for f in fields(ToolConfig)}


def _coerce(name: str, raw: Any) -> Any:
    if raw is None:
        return None
    default = ToolConfig.__dataclass_fields__[name].default
    kind = type(default) if default not in (None, dataclasses.MISSING) else str
    if name == "workers":
        kind = int
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: cannot parse {raw!r} as a boolean")
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """Flat ``key = value`` lines; section headers are optional and ignored."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string("[_]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.replace("-", "_")
            if key not in _FIELDS:
                raise ConfigError(f"{path}: unknown key {key!r}")
            out[key] = _coerce(key, value)
    return out


def read_env(environ: Mapping[str, str]) -> dict[str, Any]:
    out = {}
    for name in _FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ and name != "api_key_env":
            out[name] = _coerce(name, environ[key])
    return out


def resolve(
    flags: Mapping[str, Any],
    config_path: str | os.PathLike | None = None,
    environ: Mapping[str, str] | None = None,
) -> ToolConfig:
    """flags > env > file > defaults; flags set to None count as unset."""
    merged: dict[str, Any] = {}
    if config_path:
        merged.update(read_config_file(config_path))
    merged.update(read_env(os.environ if environ is None else environ))
    merged.update({k: _coerce(k, v) for k, v in flags.items() if v is not None and k in _FIELDS})
    return ToolConfig(**merged)
