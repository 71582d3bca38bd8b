"""Action matching and episode metrics (AMS, SR, TSS)."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .episodes import ACTION_TAGS, Action, Click, Home, Other, Scroll, Stop, Type

TYPE_MATCH_MODES = ("exact", "fuzzy")


@dataclass(frozen=True)
class MatchConfig:
    """Per-type matching rules.

    ``click_radius`` is a Euclidean distance in screen-fraction units.
    TYPE text is case-folded and whitespace-collapsed, then compared either
    exactly or by normalized Levenshtein similarity >= ``type_threshold``.
    """

    click_radius: float = 0.14
    type_match: str = "fuzzy"
    type_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.click_radius <= 1.0:
            raise ValueError(f"click_radius must be in (0, 1], got {self.click_radius}")
        if self.type_match not in TYPE_MATCH_MODES:
            raise ValueError(f"type_match must be one of {TYPE_MATCH_MODES}")
        if not 0.0 <= self.type_threshold <= 1.0:
            raise ValueError(f"type_threshold must be in [0, 1], got {self.type_threshold}")


DEFAULT_MATCH = MatchConfig()


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.casefold()).strip()


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def text_similarity(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def action_type(a: Action) -> str:
    return a.tag


def match_action(pred: Action, gt: Action, cfg: MatchConfig = DEFAULT_MATCH) -> bool:
    if type(pred) is not type(gt):
        return False
    if isinstance(gt, Click):
        return math.hypot(pred.x - gt.x, pred.y - gt.y) <= cfg.click_radius
    if isinstance(gt, Type):
        p, g = normalize_text(pred.text), normalize_text(gt.text)
        if cfg.type_match == "exact":
            return p == g
        return text_similarity(p, g) >= cfg.type_threshold
    if isinstance(gt, Scroll):
        return pred.direction == gt.direction
    if isinstance(gt, (Home, Stop)):
        return True
    return pred.name == gt.name and pred.payload == gt.payload


# -- traces ------------------------------------------------------------------

@dataclass(frozen=True)
class TraceStep:
    pred: Action
    gt: Action


@dataclass
class EpisodeTrace:
    episode_id: str
    steps: list[TraceStep] = field(default_factory=list)
    complete: bool = True


class EmptyTraceError(ValueError):
    pass


def _check(traces: Sequence[EpisodeTrace]) -> None:
    if not traces or not any(t.steps for t in traces):
        raise EmptyTraceError("no trace steps to score")


def step_matches(trace: EpisodeTrace, cfg: MatchConfig = DEFAULT_MATCH) -> list[bool]:
    return [match_action(s.pred, s.gt, cfg) for s in trace.steps]


def compute_ams(traces: Sequence[EpisodeTrace], cfg: MatchConfig = DEFAULT_MATCH
                ) -> tuple[float, dict[str, float | None]]:
    """Percentage of matched steps, plus the same figure per ground-truth action type.

    Types without support map to None.
    """
    _check(traces)
    hits: dict[str, int] = {}
    support: dict[str, int] = {}
    for trace in traces:
        for s, ok in zip(trace.steps, step_matches(trace, cfg)):
            tag = action_type(s.gt)
            support[tag] = support.get(tag, 0) + 1
            hits[tag] = hits.get(tag, 0) + ok
    total = sum(support.values())
    breakdown: dict[str, float | None] = {tag: None for tag in ACTION_TAGS}
    for tag, n in support.items():
        breakdown[tag] = 100.0 * hits[tag] / n
    return 100.0 * sum(hits.values()) / total, breakdown


def compute_sr(traces: Sequence[EpisodeTrace], cfg: MatchConfig = DEFAULT_MATCH) -> float:
    _check(traces)
    scored = [t for t in traces if t.steps]
    done = sum(all(step_matches(t, cfg)) for t in scored)
    return 100.0 * done / len(scored)


def compute_tss(traces: Sequence[EpisodeTrace], cfg: MatchConfig = DEFAULT_MATCH) -> float | None:
    """Task-switching score over steps whose ground truth is HOME.

    A HOME step succeeds when it and the following step both match; a HOME
    on the last step is judged on itself. Returns None without HOME steps.
    """
    _check(traces)
    homes = wins = 0
    for trace in traces:
        ok = step_matches(trace, cfg)
        for i, s in enumerate(trace.steps):
            if not isinstance(s.gt, Home):
                continue
            homes += 1
            wins += ok[i] and (i + 1 == len(ok) or ok[i + 1])
    return 100.0 * wins / homes if homes else None


# -- report ------------------------------------------------------------------

@dataclass
class EvalReport:
    ams: float
    sr: float
    tss: float | None
    per_action_type: dict[str, float | None]
    per_episode: dict[str, list[bool]]
    n_episodes: int
    n_steps: int
    incomplete_episodes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ams": _r(self.ams),
            "sr": _r(self.sr),
            "tss": _r(self.tss),
            "per_action_type": {k: _r(v) for k, v in self.per_action_type.items()},
            "n_episodes": self.n_episodes,
            "n_steps": self.n_steps,
            "incomplete_episodes": self.incomplete_episodes,
            "per_episode": self.per_episode,
        }

    def table(self) -> str:
        cols = list(ACTION_TAGS) + ["AMS", "SR", "TSS"]
        vals = [self.per_action_type.get(t) for t in ACTION_TAGS] + [self.ams, self.sr, self.tss]
        cells = ["-" if v is None else f"{v:.2f}" for v in vals]
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        head = " | ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = " | ".join(v.rjust(w) for v, w in zip(cells, widths))
        lines = [head, "-+-".join("-" * w for w in widths), row,
                 f"episodes: {self.n_episodes}  steps: {self.n_steps}"]
        if self.incomplete_episodes:
            lines.append(f"incomplete episodes excluded: {len(self.incomplete_episodes)}")
        return "\n".join(lines)


def _r(v: float | None) -> float | None:
    # fixed rounding keeps report JSON stable across platforms
    return None if v is None else round(v, 10)


def evaluate(traces: Iterable[EpisodeTrace], cfg: MatchConfig = DEFAULT_MATCH) -> EvalReport:
    """Score complete traces; incomplete ones are listed but not scored."""
    traces = list(traces)
    scored = [t for t in traces if t.complete]
    ams, breakdown = compute_ams(scored, cfg)
    per_episode: dict[str, list[bool]] = {}
    for t in scored:
        key = t.episode_id
        n = 2
        while key in per_episode:
            key = f"{t.episode_id}#{n}"
            n += 1
        per_episode[key] = step_matches(t, cfg)
    return EvalReport(
        ams=ams,
        sr=compute_sr(scored, cfg),
        tss=compute_tss(scored, cfg),
        per_action_type=breakdown,
        per_episode=per_episode,
        n_episodes=len(scored),
        n_steps=sum(len(t.steps) for t in scored),
        incomplete_episodes=[t.episode_id for t in traces if not t.complete],
    )
