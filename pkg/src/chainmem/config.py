"""Settings merged from a TOML file, environment variables and CLI flags.

Precedence: flag > file > environment > built-in default. Unknown sections
or keys in the file are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backend import ENV_KEY, ENV_MODEL, ENV_URL
from .orchestrator import ConfigError


@dataclass
class RunSection:
    memory_mode: str = "generated"
    stm_capacity: int = 4
    use_stm: bool = True
    use_ltm: bool = True
    use_screen_info: bool = False
    teacher_forcing: bool = True
    decision_prompt: str = "decide"
    prompt_dir: str | None = None
    screens_root: str | None = None
    workers: int = 1


@dataclass
class MatchSection:
    click_radius: float = 0.14
    type_match: str = "fuzzy"
    type_threshold: float = 0.5


@dataclass
class BackendSection:
    url: str | None = None
    model: str | None = None
    api_key_env: str = ENV_KEY
    mock_script: str | None = None
    max_attempts: int = 3
    timeout: float = 120.0
    max_in_flight: int = 4


@dataclass
class PerceptionSection(BackendSection):
    same_as_decision: bool = False


@dataclass
class AnnotateSection:
    candidates: int = 3
    temperature: float = 0.7
    rubric_dir: str | None = None
    judge_url: str | None = None
    judge_model: str | None = None
    judge_mock_script: str | None = None


@dataclass
class CliConfig:
    run: RunSection = field(default_factory=RunSection)
    match: MatchSection = field(default_factory=MatchSection)
    backend: BackendSection = field(default_factory=BackendSection)
    perception: PerceptionSection = field(default_factory=PerceptionSection)
    annotate: AnnotateSection = field(default_factory=AnnotateSection)

    def set(self, dotted: str, value: Any) -> None:
        section, key = dotted.split(".")
        target = getattr(self, section)
        names = {f.name: f for f in fields(target)}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(target, key, _coerce(value, names[key].default, dotted))


def _coerce(value: Any, default: Any, name: str) -> Any:
    if value is None or default is None:
        return value
    kind = type(default)
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be true or false")
    if kind in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return kind(value)
    return str(value)


def load_config(path: str | os.PathLike | None = None, env: dict | None = None) -> CliConfig:
    env = os.environ if env is None else env
    cfg = CliConfig()
    if env.get(ENV_URL):
        cfg.backend.url = env[ENV_URL]
    if env.get(ENV_MODEL):
        cfg.backend.model = env[ENV_MODEL]
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from None
    sections = {f.name for f in fields(cfg)}
    for section, values in data.items():
        if section not in sections or not isinstance(values, dict):
            raise ConfigError(f"unknown config section {section!r}")
        for key, value in values.items():
            cfg.set(f"{section}.{key}", value)
    base = Path(path).parent
    # relative paths inside the file are relative to the file
    for section, key in (("run", "prompt_dir"), ("run", "screens_root"),
                         ("backend", "mock_script"), ("perception", "mock_script"),
                         ("annotate", "rubric_dir"), ("annotate", "judge_mock_script")):
        value = getattr(getattr(cfg, section), key)
        if value and key in data.get(section, {}) and not Path(value).is_absolute():
            setattr(getattr(cfg, section), key, str(base / value))
    return cfg
