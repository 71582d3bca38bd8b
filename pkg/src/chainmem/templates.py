"""Plain-text prompt templates with ``{{name}}`` placeholders.

Template files live in one directory, one file per stage. Leading lines
starting with ``#!`` are metadata (e.g. ``#! version: 1``) and are not part
of the rendered prompt.
"""

from __future__ import annotations

import os
import re
from functools import lru_cache
from pathlib import Path

PROMPT_DIR = Path(__file__).with_name("prompts")
RUBRIC_DIR = Path(__file__).with_name("rubrics")

STAGES = ("detect_target", "compare", "screen_info", "ltm_evaluate", "app_detect", "decide")

_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


class TemplateError(KeyError):
    pass


@lru_cache(maxsize=None)
def _read(path: Path) -> tuple[str, dict]:
    meta = {}
    lines = path.read_text(encoding="utf-8").splitlines()
    while lines and lines[0].startswith("#!"):
        key, _, value = lines.pop(0)[2:].partition(":")
        meta[key.strip()] = value.strip()
    return "\n".join(lines).strip("\n"), meta


def read_text_file(path: str | os.PathLike) -> str:
    return _read(Path(path))[0]


def render(template: str, values: dict) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise TemplateError(f"no value for placeholder {{{{{name}}}}}")
        return str(values[name])

    return _PLACEHOLDER.sub(sub, template)


def placeholders(template: str) -> set[str]:
    return set(_PLACEHOLDER.findall(template))


class PromptTemplates:
    """Loads templates by name from a directory (the packaged set by default)."""

    def __init__(self, directory: str | os.PathLike | None = None) -> None:
        self.directory = Path(directory) if directory is not None else PROMPT_DIR

    def source(self, name: str) -> str:
        path = self.directory / f"{name}.txt"
        if not path.exists():
            raise TemplateError(f"template {name!r} not found in {self.directory}")
        return _read(path)[0]

    def version(self, name: str) -> str | None:
        return _read(self.directory / f"{name}.txt")[1].get("version")

    def render(self, name: str, **values) -> str:
        return render(self.source(name), values)


DEFAULT_TEMPLATES = PromptTemplates()
