"""Episode data model and the JSONL corpus format.

One episode per line::

    {"id": ..., "instruction": ..., "meta": {...},
     "steps": [{"index": 0, "screenshot": "ep0/0.png", "app": "Chrome",
                "action": {"type": "CLICK", "x": 0.5, "y": 0.9},
                "com": {"action_result": ..., "screen_info": ...,
                        "ltm": {"store": true, "content": ...},
                        "stm_snapshot": [...], "ltm_snapshot": [[app, content], ...]}}]}

Coordinates are fractions of the screen size. ``com`` and all of its keys
are optional; absent keys stay absent through a load/save round trip.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Union

from .memory import DEFAULT_STM_CAPACITY, StorageDecision

log = logging.getLogger(__name__)

SCROLL_DIRECTIONS = ("up", "down", "left", "right")


# -- actions -----------------------------------------------------------------

@dataclass(frozen=True)
class Click:
    x: float
    y: float
    tag = "CLICK"


@dataclass(frozen=True)
class Type:
    text: str
    tag = "TYPE"


@dataclass(frozen=True)
class Scroll:
    direction: str
    tag = "SCROLL"


@dataclass(frozen=True)
class Home:
    tag = "HOME"


@dataclass(frozen=True)
class Stop:
    tag = "STOP"


@dataclass(frozen=True)
class Other:
    """Any action outside the five core types, kept verbatim."""

    name: str
    payload: Any = None
    tag = "OTHER"

    def __hash__(self) -> int:
        return hash((self.name, json.dumps(self.payload, sort_keys=True, default=str)))


Action = Union[Click, Type, Scroll, Home, Stop, Other]
ACTION_TAGS = ("CLICK", "TYPE", "SCROLL", "HOME", "STOP")
_STOP_ALIASES = {"STOP", "COMPLETE"}


class DatasetError(ValueError):
    """Schema violation, located by file, line and field where known."""

    def __init__(self, message: str, *, path: str | os.PathLike | None = None,
                 line: int | None = None, field: str | None = None) -> None:
        self.path = str(path) if path is not None else None
        self.line = line
        self.field = field
        self.message = message
        where = ":".join(str(p) for p in (self.path, line) if p is not None)
        prefix = f"{where}: " if where else ""
        suffix = f" (field {field})" if field else ""
        super().__init__(f"{prefix}{message}{suffix}")


def _unit(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DatasetError(f"{name} must be a number", field=name)
    v = float(value)
    if not math.isfinite(v) or not 0.0 <= v <= 1.0:
        raise DatasetError(f"{name} out of [0,1]: {value}", field=name)
    return v


def action_from_dict(d: dict) -> Action:
    if not isinstance(d, dict) or "type" not in d:
        raise DatasetError("action must be an object with a 'type'", field="action.type")
    name = str(d["type"])
    tag = name.upper()
    if tag == "CLICK":
        return Click(_unit(d.get("x"), "x"), _unit(d.get("y"), "y"))
    if tag == "TYPE":
        text = d.get("text", "")
        if not isinstance(text, str):
            raise DatasetError("text must be a string", field="text")
        return Type(text)
    if tag == "SCROLL":
        direction = str(d.get("direction", "")).lower()
        if direction not in SCROLL_DIRECTIONS:
            raise DatasetError(f"direction must be one of {SCROLL_DIRECTIONS}, got "
                               f"{d.get('direction')!r}", field="direction")
        return Scroll(direction)
    if tag == "HOME":
        return Home()
    if tag in _STOP_ALIASES:
        return Stop()
    payload = {k: v for k, v in d.items() if k != "type"}
    return Other(name, payload or None)


def action_to_dict(a: Action) -> dict:
    if isinstance(a, Click):
        return {"type": "CLICK", "x": a.x, "y": a.y}
    if isinstance(a, Type):
        return {"type": "TYPE", "text": a.text}
    if isinstance(a, Scroll):
        return {"type": "SCROLL", "direction": a.direction}
    if isinstance(a, Home):
        return {"type": "HOME"}
    if isinstance(a, Stop):
        return {"type": "STOP"}
    d: dict = {"type": a.name}
    if isinstance(a.payload, dict):
        d.update(a.payload)
    elif a.payload is not None:
        d["payload"] = a.payload
    return d


def format_action(a: Action) -> str:
    """Render an action in the decision line grammar (``CLICK 0.43 0.88``)."""
    if isinstance(a, Click):
        return f"CLICK {a.x:.2f} {a.y:.2f}"
    if isinstance(a, Type):
        return f"TYPE {a.text}"
    if isinstance(a, Scroll):
        return f"SCROLL {a.direction.upper()}"
    if isinstance(a, (Home, Stop)):
        return a.tag
    return f"{a.name.upper()} {json.dumps(a.payload, sort_keys=True)}" if a.payload else a.name.upper()


# -- episodes ----------------------------------------------------------------

@dataclass(frozen=True)
class CoMAnnotations:
    action_result: str | None = None
    screen_info: str | None = None
    ltm_decision: StorageDecision | None = None
    stm_snapshot: tuple[str, ...] | None = None
    ltm_snapshot: tuple[tuple[str, str], ...] | None = None

    def is_empty(self) -> bool:
        return all(getattr(self, f) is None for f in self.__dataclass_fields__)


@dataclass(frozen=True)
class Step:
    index: int
    screenshot: str
    gt_action: Action
    app: str | None = None
    annotations: CoMAnnotations | None = None


@dataclass(frozen=True)
class Episode:
    id: str
    instruction: str
    steps: tuple[Step, ...]
    meta: dict = field(default_factory=dict, hash=False)

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class ValidationReport:
    episode_id: str
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_episode(
    e: Episode,
    stm_capacity: int = DEFAULT_STM_CAPACITY,
    screens_root: str | os.PathLike | None = None,
) -> ValidationReport:
    report = ValidationReport(e.id)
    v = report.violations
    if not e.steps:
        v.append("episode has no steps")
        return report
    if not e.instruction.strip():
        v.append("instruction is empty")
    for pos, step in enumerate(e.steps):
        where = f"step {step.index}"
        if step.index != pos:
            v.append(f"{where}: index is not contiguous (expected {pos})")
        a = step.gt_action
        if isinstance(a, Click) and not (0.0 <= a.x <= 1.0 and 0.0 <= a.y <= 1.0):
            v.append(f"{where}: click x/y out of [0,1]")
        if isinstance(a, Scroll) and a.direction not in SCROLL_DIRECTIONS:
            v.append(f"{where}: unknown scroll direction {a.direction!r}")
        if step.app is not None and not step.app.strip():
            v.append(f"{where}: app label is empty")
        ann = step.annotations
        if ann is not None:
            if ann.stm_snapshot is not None:
                if len(ann.stm_snapshot) > stm_capacity:
                    v.append(f"{where}: stm_snapshot has {len(ann.stm_snapshot)} entries, "
                             f"exceeds capacity {stm_capacity}")
                if any(not t.strip() for t in ann.stm_snapshot):
                    v.append(f"{where}: stm_snapshot contains an empty entry")
            if ann.ltm_snapshot is not None:
                apps = [app.strip() for app, _ in ann.ltm_snapshot]
                if any(a1 == a2 for a1, a2 in zip(apps, apps[1:])):
                    v.append(f"{where}: ltm_snapshot has consecutive entries for one app")
                if any(not app or not c.strip() for app, c in zip(apps, (c for _, c in ann.ltm_snapshot))):
                    v.append(f"{where}: ltm_snapshot contains an empty entry")
        if screens_root is not None and not _is_url(step.screenshot):
            if not (Path(screens_root) / step.screenshot).exists():
                report.warnings.append(f"{where}: screenshot not found: {step.screenshot}")
    if not isinstance(e.steps[-1].gt_action, Stop):
        v.append("terminal action is not Stop")
    return report


def _is_url(ref: str) -> bool:
    return ref.startswith(("http://", "https://", "data:"))


# -- (de)serialization -------------------------------------------------------

def _annotations_from_dict(d: dict) -> CoMAnnotations:
    if not isinstance(d, dict):
        raise DatasetError("com must be an object", field="com")
    ltm = None
    if "ltm" in d and d["ltm"] is not None:
        raw = d["ltm"]
        try:
            ltm = StorageDecision(bool(raw["store"]), raw.get("content", "") or "")
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad ltm decision: {exc}", field="com.ltm") from None
    stm_snap = d.get("stm_snapshot")
    ltm_snap = d.get("ltm_snapshot")
    try:
        return CoMAnnotations(
            action_result=d.get("action_result"),
            screen_info=d.get("screen_info"),
            ltm_decision=ltm,
            stm_snapshot=tuple(str(t) for t in stm_snap) if stm_snap is not None else None,
            ltm_snapshot=(tuple((str(a), str(c)) for a, c in ltm_snap)
                          if ltm_snap is not None else None),
        )
    except (TypeError, ValueError):
        raise DatasetError("malformed snapshot", field="com.ltm_snapshot") from None


def _annotations_to_dict(a: CoMAnnotations) -> dict:
    d: dict = {}
    if a.action_result is not None:
        d["action_result"] = a.action_result
    if a.screen_info is not None:
        d["screen_info"] = a.screen_info
    if a.ltm_decision is not None:
        d["ltm"] = {"store": a.ltm_decision.store, "content": a.ltm_decision.content}
    if a.stm_snapshot is not None:
        d["stm_snapshot"] = list(a.stm_snapshot)
    if a.ltm_snapshot is not None:
        d["ltm_snapshot"] = [[app, c] for app, c in a.ltm_snapshot]
    return d


def episode_from_dict(d: dict) -> Episode:
    if not isinstance(d, dict):
        raise DatasetError("episode must be a JSON object")
    for key in ("id", "instruction", "steps"):
        if key not in d:
            raise DatasetError(f"missing required key {key!r}", field=key)
    if not isinstance(d["steps"], list) or not d["steps"]:
        raise DatasetError("steps must be a non-empty list", field="steps")
    steps = []
    for pos, s in enumerate(d["steps"]):
        try:
            if not isinstance(s, dict):
                raise DatasetError("step must be an object")
            for key in ("index", "screenshot", "action"):
                if key not in s:
                    raise DatasetError(f"missing required key {key!r}", field=key)
            com = s.get("com")
            steps.append(Step(
                index=int(s["index"]),
                screenshot=str(s["screenshot"]),
                gt_action=action_from_dict(s["action"]),
                app=s.get("app"),
                annotations=_annotations_from_dict(com) if com is not None else None,
            ))
        except DatasetError as exc:
            raise DatasetError(f"episode {d['id']} step {pos}: {exc.message}",
                               field=f"steps[{pos}].{exc.field or ''}".rstrip(".")) from None
    meta = d.get("meta") or {}
    if not isinstance(meta, dict):
        raise DatasetError("meta must be an object", field="meta")
    return Episode(str(d["id"]), str(d["instruction"]), tuple(steps), meta)


def episode_to_dict(e: Episode) -> dict:
    steps = []
    for s in e.steps:
        sd: dict = {"index": s.index, "screenshot": s.screenshot}
        if s.app is not None:
            sd["app"] = s.app
        sd["action"] = action_to_dict(s.gt_action)
        if s.annotations is not None:
            sd["com"] = _annotations_to_dict(s.annotations)
        steps.append(sd)
    return {"id": e.id, "instruction": e.instruction, "meta": e.meta, "steps": steps}


def dumps_episode(e: Episode) -> str:
    return json.dumps(episode_to_dict(e), ensure_ascii=False, sort_keys=False)


def _dataset_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".jsonl")
    return [path]


def iter_episodes(path: str | os.PathLike) -> Iterable[Episode]:
    """Yield episodes from a JSONL file or every ``*.jsonl`` in a directory."""
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"dataset not found: {root}")
    for file in _dataset_files(root):
        with open(file, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    yield episode_from_dict(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"invalid JSON: {exc.msg}", path=file, line=lineno) from None
                except DatasetError as exc:
                    raise DatasetError(exc.message, path=file, line=lineno, field=exc.field) from None


def load_dataset(
    path: str | os.PathLike,
    screens_root: str | os.PathLike | None = None,
    warnings: list[str] | None = None,
) -> list[Episode]:
    """Load and validate every episode under ``path``.

    Invariant violations raise :class:`DatasetError`. Missing screenshots
    are only collected into ``warnings`` (when given) and logged.
    """
    episodes = []
    for e in iter_episodes(path):
        for pos, step in enumerate(e.steps):
            if step.index != pos:
                raise DatasetError(f"episode {e.id}: step index {step.index} is not "
                                   f"contiguous (expected {pos})", path=path, field="index")
        # terminal-action and snapshot rules are reported by validate_episode, not enforced here
        report = validate_episode(e, screens_root=screens_root)
        for w in report.warnings:
            log.warning("%s: %s", e.id, w)
            if warnings is not None:
                warnings.append(f"{e.id}: {w}")
        episodes.append(e)
    return episodes


def save_annotated(episodes: Iterable[Episode], path: str | os.PathLike) -> None:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            for e in episodes:
                fh.write(dumps_episode(e) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {target}: {exc.strerror or exc}") from exc
