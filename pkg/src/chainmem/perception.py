"""Model-backed perception stages of one memory step.

Each stage is a request builder plus a response parser; the public
functions combine the two with greedy decoding. The annotation pipeline
reuses the builders with sampling decoding.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .backend import GREEDY, Backend, BackendError, Decoding, ImagePart, ModelRequest, \
    greedy, simple_request
from .episodes import Action, Click, Step, format_action
from .memory import ActionResult, ShortTermMemory, StorageDecision, render_stm
from .templates import DEFAULT_TEMPLATES, PromptTemplates

log = logging.getLogger(__name__)

TASK_STARTED = "Task started."
EMPTY_SCREEN_INFO_TEXT = "No screen information."
NO_TARGET_TEXT = "not applicable"

LTM_FORMAT_REMINDER = ("\n\nReminder: reply with exactly two lines, "
                       "'store: yes' or 'store: no', then 'content: ...'.")


class StageError(RuntimeError):
    """A pipeline stage failed. Carries the stage label and, once known, its location."""

    def __init__(self, stage: str, message: str, *, episode_id: str | None = None,
                 step: int | None = None) -> None:
        self.stage = stage
        self.message = message
        self.episode_id = episode_id
        self.step = step
        super().__init__(str(self))

    def __str__(self) -> str:
        where = ""
        if self.episode_id is not None:
            where = f"episode {self.episode_id} step {self.step}: "
        return f"{where}[{self.stage}] {self.message}"

    def located(self, episode_id: str, step: int) -> "StageError":
        err = StageError(self.stage, self.message, episode_id=episode_id, step=step)
        err.__cause__ = self.__cause__
        return err

    @property
    def backend_failure(self) -> bool:
        return isinstance(self.__cause__, BackendError)


@dataclass(frozen=True)
class ScreenRef:
    ref: str
    step_index: int
    root: str | None = None

    def image(self) -> ImagePart:
        return ImagePart(self.ref, self.root)


@dataclass(frozen=True)
class ClickTarget:
    description: str


@dataclass(frozen=True)
class ScreenInfo:
    text: str


def screen_of(step: Step, root: str | None = None) -> ScreenRef:
    return ScreenRef(step.screenshot, step.index, root)


def _call(stage: str, backend: Backend, req: ModelRequest) -> str:
    try:
        return greedy(backend, req)
    except BackendError as exc:
        raise StageError(stage, str(exc)) from exc


# -- request builders --------------------------------------------------------

def detect_target_request(prev_screen: ScreenRef, click: Click,
                          templates: PromptTemplates = DEFAULT_TEMPLATES) -> ModelRequest:
    text = templates.render("detect_target", x=f"{click.x:.2f}", y=f"{click.y:.2f}")
    return simple_request(text, prev_screen.image(), stage="detect_target")


def compare_request(target: ClickTarget | None, prev_action: Action, cur: ScreenRef,
                    prev: ScreenRef, templates: PromptTemplates = DEFAULT_TEMPLATES,
                    decoding: Decoding = GREEDY) -> ModelRequest:
    text = templates.render("compare", action=format_action(prev_action),
                            target=target.description if target else NO_TARGET_TEXT)
    return simple_request(text, prev.image(), cur.image(), stage="compare", decoding=decoding)


def screen_info_request(q: str, cur: ScreenRef, stm: ShortTermMemory,
                        templates: PromptTemplates = DEFAULT_TEMPLATES,
                        decoding: Decoding = GREEDY) -> ModelRequest:
    text = templates.render("screen_info", instruction=q, stm=render_stm(stm))
    return simple_request(text, cur.image(), stage="screen_info", decoding=decoding)


def ltm_request(q: str, stm: ShortTermMemory, info: ScreenInfo,
                templates: PromptTemplates = DEFAULT_TEMPLATES,
                decoding: Decoding = GREEDY, reminder: bool = False) -> ModelRequest:
    text = templates.render("ltm_evaluate", instruction=q, stm=render_stm(stm),
                            screen_info=info.text or EMPTY_SCREEN_INFO_TEXT)
    if reminder:
        text += LTM_FORMAT_REMINDER
    return simple_request(text, stage="ltm_evaluate", decoding=decoding)


# -- parsers -----------------------------------------------------------------

_STORE = re.compile(r"\bstore\s*[:=]\s*[*\"']*\s*(yes|no|true|false)\b", re.I)
_CONTENT = re.compile(r"\bcontent\s*[:=](.*)", re.I | re.S)


def parse_storage_decision(text: str) -> StorageDecision:
    """Parse the ``store: yes|no`` / ``content: ...`` answer format."""
    m = _STORE.search(text)
    if not m:
        raise ValueError(f"no store flag in {text[:80]!r}")
    store = m.group(1).lower() in ("yes", "true")
    if not store:
        return StorageDecision(False, "")
    c = _CONTENT.search(text, m.end())
    content = c.group(1).strip() if c else ""
    if not content:
        raise ValueError("store is yes but content is empty")
    return StorageDecision(True, content)


def _one_line(text: str) -> str:
    return next((ln.strip() for ln in text.strip().splitlines() if ln.strip()), "")


# -- stages ------------------------------------------------------------------

def detect_click_target(backend: Backend, prev_screen: ScreenRef, prev_action: Action,
                        templates: PromptTemplates = DEFAULT_TEMPLATES) -> ClickTarget | None:
    """Describe the element hit by the previous click; None for any other action."""
    if not isinstance(prev_action, Click):
        return None
    answer = _call("detect_target", backend,
                   detect_target_request(prev_screen, prev_action, templates))
    description = _one_line(answer)
    if not description:
        raise StageError("detect_target", "empty target description")
    return ClickTarget(description)


def summarize_action_result(backend: Backend, target: ClickTarget | None,
                            prev_action: Action | None, cur: ScreenRef,
                            prev: ScreenRef | None,
                            templates: PromptTemplates = DEFAULT_TEMPLATES) -> ActionResult:
    if prev is None or prev_action is None:
        return ActionResult(cur.step_index, TASK_STARTED)
    if cur.step_index != prev.step_index + 1:
        raise StageError("compare", f"screens {prev.step_index} and {cur.step_index} "
                                    f"are not consecutive")
    req = compare_request(target, prev_action, cur, prev, templates)
    for _ in range(2):
        text = _call("compare", backend, req).strip()
        if text:
            return ActionResult(cur.step_index, text)
        log.warning("empty action result at step %d, retrying", cur.step_index)
    raise StageError("compare", "backend returned an empty action result twice")


def extract_screen_info(backend: Backend, q: str, cur: ScreenRef, stm: ShortTermMemory,
                        templates: PromptTemplates = DEFAULT_TEMPLATES) -> ScreenInfo:
    text = _call("screen_info", backend, screen_info_request(q, cur, stm, templates))
    return ScreenInfo(text.strip())


def evaluate_for_ltm(backend: Backend, q: str, stm: ShortTermMemory, info: ScreenInfo,
                     templates: PromptTemplates = DEFAULT_TEMPLATES) -> StorageDecision:
    last = ""
    for reminder in (False, True):
        last = _call("ltm_evaluate", backend, ltm_request(q, stm, info, templates,
                                                          reminder=reminder))
        try:
            return parse_storage_decision(last)
        except ValueError:
            log.warning("unparseable storage decision %r", last[:80])
    raise StageError("ltm_evaluate", f"unparseable storage decision: {last[:120]!r}")


def detect_app(step: Step, backend: Backend | None = None, screens_root: str | None = None,
               templates: PromptTemplates = DEFAULT_TEMPLATES) -> str:
    """App label for a step: dataset metadata first, the backend only as a fallback."""
    if step.app and step.app.strip():
        return step.app.strip()
    if backend is None:
        raise StageError("detect_app", "app unknown: no metadata and no backend")
    req = simple_request(templates.render("app_detect"),
                         screen_of(step, screens_root).image(), stage="detect_app")
    app = _one_line(_call("detect_app", backend, req))
    if not app:
        raise StageError("detect_app", "app unknown: backend gave no name")
    return app
