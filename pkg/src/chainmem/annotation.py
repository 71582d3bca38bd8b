"""Judged generation of memory annotations for a corpus.

Per step, fields are produced in dependency order: the action result
(which extends the short-term memory), then the screen information using
that memory, then the long-term storage decision using the selected screen
information. Each field is sampled several times, every candidate is scored
by a judge model against the rubric for its field, and the best-scoring
candidate is kept. Fields already present are reused, so rerunning over a
partially annotated corpus only fills the gaps.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .backend import Backend, BackendError, Decoding, ModelRequest, greedy, simple_request
from .episodes import CoMAnnotations, Episode, Step, format_action
from .memory import (DEFAULT_STM_CAPACITY, NO_STORE, ActionResult, LongTermMemory,
                     ShortTermMemory, StorageDecision, ltm_update, render_stm, stm_update)
from .perception import (TASK_STARTED, ScreenInfo, StageError, compare_request,
                         detect_app, detect_click_target, ltm_request,
                         parse_storage_decision, screen_info_request, screen_of)
from .templates import DEFAULT_TEMPLATES, RUBRIC_DIR, PromptTemplates, read_text_file

log = logging.getLogger(__name__)

FIELDS = ("action_result", "screen_info", "ltm_decision")
SCORE_MIN, SCORE_MAX = 1, 10


@dataclass(frozen=True)
class JudgeRubric:
    standards: dict[str, str]
    scale: tuple[int, int] = (SCORE_MIN, SCORE_MAX)

    def __post_init__(self) -> None:
        missing = [f for f in FIELDS if f not in self.standards]
        if missing:
            raise ValueError(f"rubric lacks standards for {missing}")
        if self.scale != (SCORE_MIN, SCORE_MAX):
            raise ValueError(f"score scale is fixed at {SCORE_MIN}..{SCORE_MAX}")

    @classmethod
    def load(cls, directory: str | os.PathLike | None = None) -> "JudgeRubric":
        root = Path(directory) if directory else RUBRIC_DIR
        return cls({f: read_text_file(root / f"{f}.txt") for f in FIELDS})


@dataclass
class CandidateSet:
    field: str
    candidates: list[str]
    scores: list[int | None]
    selected: int
    episode_id: str = ""
    step: int = 0

    def to_json(self) -> dict:
        return {"episode_id": self.episode_id, "step": self.step, "field": self.field,
                "candidates": self.candidates, "scores": self.scores, "selected": self.selected}


def select_best(scores: Sequence[int | None]) -> int:
    """Index of the highest score; ties go to the lowest index, None never wins."""
    best = None
    for i, s in enumerate(scores):
        if s is not None and (best is None or s > scores[best]):
            best = i
    if best is None:
        raise ValueError("no scored candidate")
    return best


class JudgeParseError(ValueError):
    pass


_SCORE = re.compile(r"\bscore\s*[:=]\s*\**\s*(-?\d+)\b", re.I)
JUDGE_REMINDER = "\n\nReminder: answer with a single line 'score: <integer from 1 to 10>'."


def parse_score(text: str) -> int:
    m = _SCORE.search(text)
    if not m:
        raise JudgeParseError(f"no score in {text[:80]!r}")
    score = int(m.group(1))
    if not SCORE_MIN <= score <= SCORE_MAX:
        raise JudgeParseError(f"score {score} outside {SCORE_MIN}..{SCORE_MAX}")
    return score


def judge_request(candidate: str, standard: str, context: str, images=(),
                  templates: PromptTemplates = DEFAULT_TEMPLATES,
                  reminder: bool = False) -> ModelRequest:
    text = templates.render("judge", standard=standard, context=context, candidate=candidate)
    if reminder:
        text += JUDGE_REMINDER
    return simple_request(text, *images, stage="judge")


def judge_score(judge_backend: Backend, candidate: str, standard: str, context: str,
                images=(), templates: PromptTemplates = DEFAULT_TEMPLATES,
                reminder: bool = False) -> int:
    """Score one candidate from 1 to 10; raises :class:`JudgeParseError` on a bad reply."""
    req = judge_request(candidate, standard, context, images, templates, reminder)
    return parse_score(greedy(judge_backend, req))


@dataclass
class Annotator:
    gen_backend: Backend
    judge_backend: Backend
    rubric: JudgeRubric = field(default_factory=JudgeRubric.load)
    n_candidates: int = 3
    temperature: float = 0.7
    stm_capacity: int = DEFAULT_STM_CAPACITY
    screens_root: str | None = None
    templates: PromptTemplates = DEFAULT_TEMPLATES
    judge_workers: int = 1
    on_candidates: Callable[[CandidateSet], None] | None = None

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")

    @property
    def decoding(self) -> Decoding:
        return Decoding(temperature=self.temperature, n=self.n_candidates)

    # -- candidates ----------------------------------------------------------

    def _sample(self, stage: str, req: ModelRequest) -> list[str]:
        req = replace(req, decoding=self.decoding)
        try:
            choices = self.gen_backend.complete(req).choices
        except BackendError as exc:
            raise StageError(stage, str(exc)) from exc
        if len(choices) != self.n_candidates:
            raise StageError(stage, f"expected {self.n_candidates} candidates, got {len(choices)}")
        return [c.strip() for c in choices]

    def _score_all(self, field_name: str, candidates: list[str], context: str,
                   images) -> list[int | None]:
        standard = self.rubric.standards[field_name]

        def score(c: str) -> int | None:
            for reminder in (False, True):
                try:
                    return judge_score(self.judge_backend, c, standard, context, images,
                                       self.templates, reminder)
                except JudgeParseError as exc:
                    log.warning("judge reply for %s unparseable: %s", field_name, exc)
                except BackendError as exc:
                    raise StageError("judge", str(exc)) from exc
            return None

        if self.judge_workers > 1:
            with ThreadPoolExecutor(self.judge_workers) as pool:
                return list(pool.map(score, candidates))
        return [score(c) for c in candidates]

    def _choose(self, episode_id: str, step: int, field_name: str, candidates: list[str],
                context: str, images=(), valid: Sequence[bool] | None = None) -> int:
        todo = [i for i in range(len(candidates)) if valid is None or valid[i]]
        scores: list[int | None] = [None] * len(candidates)
        for i, s in zip(todo, self._score_all(field_name, [candidates[i] for i in todo],
                                              context, images)):
            scores[i] = s
        failed = [i for i in todo if scores[i] is None]
        if failed:
            log.warning("%s step %d %s: judge failed on candidates %s; keeping candidate 0",
                        episode_id, step, field_name, failed)
            selected = 0
        else:
            selected = select_best(scores)
        cs = CandidateSet(field_name, candidates, scores, selected, episode_id, step)
        if self.on_candidates:
            self.on_candidates(cs)
        return selected

    # -- episode -------------------------------------------------------------

    def annotate_episode(self, episode: Episode) -> Episode:
        stm = ShortTermMemory((), self.stm_capacity)
        ltm = LongTermMemory()
        steps: list[Step] = []
        for t, step in enumerate(episode.steps):
            try:
                ann, stm, ltm = self._annotate_step(episode, t, stm, ltm)
            except StageError as exc:
                raise exc.located(episode.id, t) from exc.__cause__
            steps.append(replace(step, annotations=ann))
        return replace(episode, steps=tuple(steps))

    def _annotate_step(self, episode: Episode, t: int, stm: ShortTermMemory,
                       ltm: LongTermMemory) -> tuple[CoMAnnotations, ShortTermMemory,
                                                     LongTermMemory]:
        step = episode.steps[t]
        old = step.annotations or CoMAnnotations()
        root = self.screens_root
        cur = screen_of(step, root)
        q = episode.instruction

        # 1. action result -> short-term memory
        result_text = old.action_result
        if result_text is None:
            if t == 0:
                result_text = TASK_STARTED
            else:
                prev_step = episode.steps[t - 1]
                prev = screen_of(prev_step, root)
                target = detect_click_target(self.gen_backend, prev, prev_step.gt_action,
                                             self.templates)
                req = compare_request(target, prev_step.gt_action, cur, prev, self.templates)
                cands = self._sample("compare", req)
                context = (f"Action performed: {format_action(prev_step.gt_action)}\n"
                           f"Tapped element: {target.description if target else 'not applicable'}")
                valid = [bool(c) for c in cands]
                if not any(valid):
                    raise StageError("compare", "all action-result candidates are empty")
                pick = self._choose(episode.id, t, "action_result", cands, context,
                                    (prev.image(), cur.image()), valid)
                result_text = cands[pick] if cands[pick] else cands[valid.index(True)]
        stm = stm_update(stm, ActionResult(t, result_text))

        # 2. screen information, conditioned on the updated memory
        info_text = old.screen_info
        if info_text is None:
            req = screen_info_request(q, cur, stm, self.templates)
            cands = self._sample("screen_info", req)
            context = f"Task: {q}\n\nRecent action results:\n{render_stm(stm)}"
            pick = self._choose(episode.id, t, "screen_info", cands, context, (cur.image(),))
            info_text = cands[pick]

        # 3. long-term storage decision, conditioned on the selected screen information
        decision = old.ltm_decision
        if decision is None:
            req = ltm_request(q, stm, ScreenInfo(info_text), self.templates)
            cands = self._sample("ltm_evaluate", req)
            parsed: list[StorageDecision | None] = []
            for c in cands:
                try:
                    parsed.append(parse_storage_decision(c))
                except ValueError:
                    parsed.append(None)
            valid = [p is not None for p in parsed]
            if any(valid):
                context = (f"Task: {q}\n\nRecent action results:\n{render_stm(stm)}\n\n"
                           f"Task-relevant screen information:\n{info_text}")
                pick = self._choose(episode.id, t, "ltm_decision", cands, context, (), valid)
                decision = parsed[pick] if parsed[pick] is not None else parsed[valid.index(True)]
            else:
                log.warning("%s step %d: no parseable storage decision, storing nothing",
                            episode.id, t)
                if self.on_candidates:
                    # selected=-1: no candidate was usable
                    self.on_candidates(CandidateSet("ltm_decision", cands, [None] * len(cands),
                                                    -1, episode.id, t))
                decision = NO_STORE
        if decision.store:
            app = detect_app(step, self.gen_backend, root, self.templates)
            ltm = ltm_update(ltm, decision, app, t)

        ann = CoMAnnotations(
            action_result=result_text,
            screen_info=info_text,
            ltm_decision=decision,
            stm_snapshot=tuple(stm.texts),
            ltm_snapshot=tuple((e.app, e.content) for e in ltm.entries),
        )
        return ann, stm, ltm


def annotate_episode(episode: Episode, gen_backend: Backend, judge_backend: Backend,
                     rubric: JudgeRubric | None = None, **kwargs) -> Episode:
    annotator = Annotator(gen_backend, judge_backend, rubric or JudgeRubric.load(), **kwargs)
    return annotator.annotate_episode(episode)


def annotate_corpus(episodes: Iterable[Episode], annotator: Annotator, workers: int = 1
                    ) -> list[Episode]:
    episodes = list(episodes)
    if workers <= 1:
        return [annotator.annotate_episode(e) for e in episodes]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(annotator.annotate_episode, episodes))


class ProvenanceLog:
    """Collects candidate sets and writes them as JSONL, ordered by episode and step."""

    def __init__(self) -> None:
        self.records: list[CandidateSet] = []

    def __call__(self, cs: CandidateSet) -> None:
        self.records.append(cs)

    def dump(self, path: str | os.PathLike, order: Sequence[str] | None = None) -> None:
        rank = {eid: i for i, eid in enumerate(order or [])}
        field_rank = {f: i for i, f in enumerate(FIELDS)}
        rows = sorted(self.records, key=lambda c: (rank.get(c.episode_id, len(rank)),
                                                    c.episode_id, c.step, field_rank[c.field]))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for cs in rows:
                fh.write(json.dumps(cs.to_json(), ensure_ascii=False) + "\n")
