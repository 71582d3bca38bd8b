"""Runs the per-step memory workflow over episodes.

For each step: detect the previous click target, summarize the previous
action into the short-term memory, extract task-relevant screen
information, judge whether to store it in long-term memory, then ask the
decision backend for the next action.

Offline runs are teacher-forced: the memory for step t+1 is always built
from the ground-truth action of step t.
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

from .backend import Backend, BackendError, greedy, simple_request
from .episodes import (SCROLL_DIRECTIONS, Action, Click, CoMAnnotations, Episode, Home, Other,
                       Scroll, Stop, Type)
from .memory import (DEFAULT_STM_CAPACITY, EMPTY_LTM_TEXT, EMPTY_STM_TEXT,
                     ActionResult, LongTermMemory, ShortTermMemory, StorageDecision,
                     ltm_update, render_ltm, render_stm, stm_update)
from .perception import (EMPTY_SCREEN_INFO_TEXT, TASK_STARTED, ClickTarget, ScreenInfo,
                         StageError, detect_app, detect_click_target, evaluate_for_ltm,
                         extract_screen_info, screen_of, summarize_action_result)
from .templates import DEFAULT_TEMPLATES, PromptTemplates

log = logging.getLogger(__name__)

STAGE_ORDER = ("detect_target", "compare", "stm_update", "screen_info",
               "detect_app", "evaluate", "ltm_update", "decide")

MEMORY_MODES = ("annotated", "generated")

# (use_screen_info, use_stm, use_ltm) for each ablation row
ABLATIONS = {
    "baseline": (False, False, False),
    "screeninfo": (True, False, False),
    "stm": (False, True, False),
    "ltm": (False, False, True),
    "stm+ltm": (False, True, True),
    "all": (True, True, True),
}

DECISION_REMINDER = ("\n\nReminder: reply with exactly one line: CLICK <x> <y>, TYPE <text>, "
                     "SCROLL <direction>, HOME or STOP.")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    memory_mode: str = "generated"
    stm_capacity: int = DEFAULT_STM_CAPACITY
    decision_prompt: str = "decide"
    decision_backend: Backend | None = field(default=None, compare=False, repr=False)
    perception_backend: Backend | None = field(default=None, compare=False, repr=False)
    use_stm: bool = True
    use_ltm: bool = True
    use_screen_info: bool = False
    teacher_forcing: bool = True
    screens_root: str | None = None
    templates: PromptTemplates = field(default=DEFAULT_TEMPLATES, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.memory_mode not in MEMORY_MODES:
            raise ConfigError(f"memory_mode must be one of {MEMORY_MODES}, got {self.memory_mode!r}")
        if self.stm_capacity < 1:
            raise ConfigError("stm_capacity must be positive")
        if self.memory_mode == "generated" and self.perception_backend is None:
            raise ConfigError("generated memory mode requires a perception backend")

    def ablated(self, name: str) -> "RunConfig":
        info, stm, ltm = ABLATIONS[name]
        return replace(self, use_screen_info=info, use_stm=stm, use_ltm=ltm)


@dataclass
class StageRecord:
    name: str
    source: str = "skipped"
    start: float = 0.0
    end: float = 0.0

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class StageArtifacts:
    click_target: str | None = None
    action_result: str | None = None
    screen_info: str | None = None
    storage_decision: StorageDecision | None = None
    app: str | None = None


@dataclass
class StepOutcome:
    episode_id: str
    step: int
    gt_action: Action
    predicted_action: Action
    raw_decision: str
    stm_after: ShortTermMemory
    ltm_after: LongTermMemory
    artifacts: StageArtifacts
    stages: list[StageRecord]
    decision_prompt: str = ""

    @property
    def timings(self) -> dict[str, float]:
        return {s.name: s.duration for s in self.stages}


class EpisodeAborted(RuntimeError):
    def __init__(self, episode_id: str, outcomes: list[StepOutcome], error: Exception) -> None:
        self.episode_id = episode_id
        self.outcomes = outcomes
        self.error = error
        super().__init__(f"episode {episode_id} aborted after {len(outcomes)} steps: {error}")


# -- decision grammar --------------------------------------------------------

class DecisionParseError(ValueError):
    pass


_COMMAND = re.compile(
    r"^[\s>*`\-]*(?i:(?:next\s+)?(?:action|answer)\s*[:=]\s*)?`*"
    r"(CLICK|TYPE|SCROLL|HOME|STOP|COMPLETE)\b(.*)$"
)
_NUM = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+))"
_CLICK_ARGS = re.compile(rf"^\s*[(\[]?\s*{_NUM}\s*[,\s]\s*{_NUM}\s*[)\]]?\s*$")
_TRAILER = re.compile(r"^[\s.`*]*$")


def _strip_quotes(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _parse_command(keyword: str, rest: str) -> Action | None:
    rest = rest.rstrip().rstrip("`").rstrip()
    if keyword == "CLICK":
        m = _CLICK_ARGS.match(rest)
        if not m:
            return None
        x, y = float(m.group(1)), float(m.group(2))
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            return None
        return Click(x, y)
    if keyword == "TYPE":
        if rest and not rest[0].isspace() and rest[0] != ":":
            return None
        return Type(_strip_quotes(rest.lstrip(":").strip()))
    if keyword == "SCROLL":
        direction = rest.strip().strip(".").lower()
        return Scroll(direction) if direction in SCROLL_DIRECTIONS else None
    if not _TRAILER.match(rest):
        return None
    return Home() if keyword == "HOME" else Stop()


def parse_decision(text: str) -> Action:
    """Extract the first valid command line from a decision response.

    Commands are upper-case and must start a line (optionally after
    ``Action:``); prose lines before or after are ignored.
    """
    for line in text.splitlines():
        m = _COMMAND.match(line)
        if m:
            action = _parse_command(m.group(1), m.group(2))
            if action is not None:
                return action
    raise DecisionParseError(f"no valid command in {text[:120]!r}")


# -- one step ----------------------------------------------------------------

class _Stages:
    def __init__(self) -> None:
        self.records: list[StageRecord] = []

    @contextmanager
    def run(self, name: str) -> Iterator[StageRecord]:
        rec = StageRecord(name, start=time.perf_counter())
        try:
            yield rec
        finally:
            rec.end = time.perf_counter()
            self.records.append(rec)


def _missing(stage: str, what: str) -> StageError:
    return StageError(stage, f"annotated mode: step has no {what} annotation "
                             f"and no perception backend is configured")


def build_decision_prompt(cfg: RunConfig, instruction: str, stm: ShortTermMemory,
                          ltm: LongTermMemory, info: ScreenInfo | None) -> str:
    return cfg.templates.render(
        cfg.decision_prompt,
        instruction=instruction,
        stm=render_stm(stm) if cfg.use_stm else EMPTY_STM_TEXT,
        ltm=render_ltm(ltm) if cfg.use_ltm else EMPTY_LTM_TEXT,
        screen_info=(info.text if cfg.use_screen_info and info and info.text
                     else EMPTY_SCREEN_INFO_TEXT),
    )


def run_step(cfg: RunConfig, episode: Episode, t: int, stm: ShortTermMemory,
             ltm: LongTermMemory, prev_prediction: Action | None = None) -> StepOutcome:
    if not 0 <= t < len(episode.steps):
        raise IndexError(f"step {t} out of range for episode {episode.id}")
    if cfg.decision_backend is None:
        raise ConfigError("no decision backend configured")
    try:
        return _run_step(cfg, episode, t, stm, ltm, prev_prediction)
    except StageError as exc:
        raise exc.located(episode.id, t) from exc.__cause__


def _run_step(cfg: RunConfig, episode: Episode, t: int, stm: ShortTermMemory,
              ltm: LongTermMemory, prev_prediction: Action | None) -> StepOutcome:
    step = episode.steps[t]
    root = cfg.screens_root
    cur = screen_of(step, root)
    prev_step = episode.steps[t - 1] if t > 0 else None
    prev_action = None
    if prev_step is not None:
        prev_action = prev_step.gt_action
        if not cfg.teacher_forcing and prev_prediction is not None:
            prev_action = prev_prediction
    ann = step.annotations or CoMAnnotations()
    annotated = cfg.memory_mode == "annotated"
    perceive = cfg.perception_backend
    tpl = cfg.templates
    need_info = cfg.use_screen_info or cfg.use_ltm
    stages = _Stages()

    target: ClickTarget | None = None
    with stages.run("detect_target") as rec:
        wants_compare = cfg.use_stm and prev_step is not None
        needs_target = not (annotated and ann.action_result is not None)
        if wants_compare and needs_target and isinstance(prev_action, Click) and perceive:
            target = detect_click_target(perceive, screen_of(prev_step, root), prev_action, tpl)
            rec.source = "backend"

    result: ActionResult | None = None
    with stages.run("compare") as rec:
        if cfg.use_stm:
            if annotated and ann.action_result is not None:
                result, rec.source = ActionResult(t, ann.action_result), "annotation"
            elif prev_step is None:
                result, rec.source = ActionResult(t, TASK_STARTED), "fixed"
            elif perceive is None:
                raise _missing("compare", "action_result")
            else:
                result = summarize_action_result(perceive, target, prev_action, cur,
                                                 screen_of(prev_step, root), tpl)
                rec.source = "backend"

    with stages.run("stm_update") as rec:
        if result is not None:
            stm = stm_update(stm, result)
            rec.source = "memory"

    info: ScreenInfo | None = None
    with stages.run("screen_info") as rec:
        if need_info:
            if annotated and ann.screen_info is not None:
                info, rec.source = ScreenInfo(ann.screen_info), "annotation"
            elif annotated and not cfg.use_screen_info and ann.ltm_decision is not None:
                pass  # only the stored decision is consumed downstream
            elif perceive is None:
                raise _missing("screen_info", "screen_info")
            else:
                info = extract_screen_info(perceive, episode.instruction, cur, stm, tpl)
                rec.source = "backend"

    app: str | None = None
    with stages.run("detect_app") as rec:
        if cfg.use_ltm:
            app = detect_app(step, perceive, root, tpl)
            rec.source = "metadata" if step.app and step.app.strip() else "backend"

    decision: StorageDecision | None = None
    with stages.run("evaluate") as rec:
        if cfg.use_ltm:
            if annotated and ann.ltm_decision is not None:
                decision, rec.source = ann.ltm_decision, "annotation"
            elif perceive is None:
                raise _missing("evaluate", "ltm")
            else:
                decision = evaluate_for_ltm(perceive, episode.instruction, stm,
                                            info or ScreenInfo(""), tpl)
                rec.source = "backend"

    with stages.run("ltm_update") as rec:
        if decision is not None and app is not None:
            ltm = ltm_update(ltm, decision, app, t)
            rec.source = "memory"

    with stages.run("decide") as rec:
        prompt = build_decision_prompt(cfg, episode.instruction, stm, ltm, info)
        predicted, raw = _decide(cfg.decision_backend, prompt, cur.image())
        rec.source = "backend"

    return StepOutcome(
        episode_id=episode.id,
        step=t,
        gt_action=step.gt_action,
        predicted_action=predicted,
        raw_decision=raw,
        stm_after=stm,
        ltm_after=ltm,
        artifacts=StageArtifacts(
            click_target=target.description if target else None,
            action_result=result.text if result else None,
            screen_info=info.text if info else None,
            storage_decision=decision,
            app=app,
        ),
        stages=stages.records,
        decision_prompt=prompt,
    )


def _decide(backend: Backend, prompt: str, image) -> tuple[Action, str]:
    raw = ""
    for text in (prompt, prompt + DECISION_REMINDER):
        try:
            raw = greedy(backend, simple_request(text, image, stage="decide"))
        except BackendError as exc:
            raise StageError("decide", str(exc)) from exc
        try:
            return parse_decision(raw), raw
        except DecisionParseError:
            log.debug("unparseable decision %r", raw[:80])
    return Other("unparsed", raw), raw


# -- episodes ----------------------------------------------------------------

def run_episode(cfg: RunConfig, episode: Episode) -> list[StepOutcome]:
    """Run every step of ``episode`` in order.

    Raises :class:`EpisodeAborted`, carrying the completed outcomes, when a
    stage fails.
    """
    stm = ShortTermMemory((), cfg.stm_capacity)
    ltm = LongTermMemory()
    outcomes: list[StepOutcome] = []
    prediction = None
    for t in range(len(episode.steps)):
        try:
            out = run_step(cfg, episode, t, stm, ltm, prediction)
        except StageError as exc:
            raise EpisodeAborted(episode.id, outcomes, exc) from exc
        outcomes.append(out)
        stm, ltm, prediction = out.stm_after, out.ltm_after, out.predicted_action
    return outcomes


@dataclass
class EpisodeRun:
    episode_id: str
    outcomes: list[StepOutcome]
    error: str | None = None
    backend_failure: bool = False

    @property
    def complete(self) -> bool:
        return self.error is None


def _run_safely(cfg: RunConfig, episode: Episode) -> EpisodeRun:
    try:
        return EpisodeRun(episode.id, run_episode(cfg, episode))
    except EpisodeAborted as exc:
        log.error("%s", exc)
        backend = isinstance(exc.error, StageError) and exc.error.backend_failure
        return EpisodeRun(episode.id, exc.outcomes, str(exc.error), backend)


def run_corpus(cfg: RunConfig, episodes: Iterable[Episode], workers: int = 1,
               sink: Callable[[EpisodeRun], None] | None = None) -> list[EpisodeRun]:
    """Run episodes with up to ``workers`` in parallel; results keep input order."""
    episodes = list(episodes)
    runs: list[EpisodeRun] = []
    if workers <= 1:
        results: Iterable[EpisodeRun] = (_run_safely(cfg, e) for e in episodes)
        for run in results:
            runs.append(run)
            if sink:
                sink(run)
        return runs
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for run in pool.map(lambda e: _run_safely(cfg, e), episodes):
            runs.append(run)
            if sink:
                sink(run)
    return runs
