"""Trace JSONL: one step outcome per line.

Step lines::

    {"episode_id": "ep0", "step": 0, "gt_action": {...}, "predicted_action": {...},
     "raw_decision": "...", "artifacts": {...}, "stm_after": [...],
     "ltm_after": [[app, content, step], ...], "stages": [[name, source], ...]}

An episode that aborted is closed by a marker line
``{"episode_id": ..., "incomplete": true, "error": ..., "steps_completed": k}``.
Timings are omitted unless requested so that traces from identical runs
are byte-identical.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, TextIO

from .episodes import DatasetError, action_from_dict, action_to_dict
from .evaluation import EpisodeTrace, TraceStep
from .orchestrator import EpisodeRun, StepOutcome


def outcome_to_dict(out: StepOutcome, timings: bool = False) -> dict:
    a = out.artifacts
    d = {
        "episode_id": out.episode_id,
        "step": out.step,
        "gt_action": action_to_dict(out.gt_action),
        "predicted_action": action_to_dict(out.predicted_action),
        "raw_decision": out.raw_decision,
        "artifacts": {
            "click_target": a.click_target,
            "action_result": a.action_result,
            "screen_info": a.screen_info,
            "storage_decision": (None if a.storage_decision is None else
                                 {"store": a.storage_decision.store,
                                  "content": a.storage_decision.content}),
            "app": a.app,
        },
        "stm_after": out.stm_after.texts,
        "ltm_after": [[e.app, e.content, e.step_index] for e in out.ltm_after.entries],
        "stages": [[s.name, s.source] for s in out.stages],
    }
    if timings:
        d["timings"] = {s.name: round(s.duration, 6) for s in out.stages}
    return d


def run_lines(run: EpisodeRun, timings: bool = False) -> list[str]:
    lines = [json.dumps(outcome_to_dict(o, timings), ensure_ascii=False) for o in run.outcomes]
    if not run.complete:
        lines.append(json.dumps({"episode_id": run.episode_id, "incomplete": True,
                                 "error": run.error, "steps_completed": len(run.outcomes)},
                                ensure_ascii=False))
    return lines


class TraceWriter:
    """Appends episode runs to a trace file as they finish."""

    def __init__(self, path: str | os.PathLike, timings: bool = False, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: TextIO = open(self.path, "a" if append else "w", encoding="utf-8", newline="\n")
        self.timings = timings

    def __call__(self, run: EpisodeRun) -> None:
        for line in run_lines(run, self.timings):
            self._fh.write(line + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_trace(runs: Iterable[EpisodeRun], path: str | os.PathLike, timings: bool = False) -> None:
    with TraceWriter(path, timings) as w:
        for run in runs:
            w(run)


def read_trace_lines(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict) or "episode_id" not in row:
                    raise ValueError("not a trace record")
                if not row.get("incomplete"):
                    row["_pred"] = action_from_dict(row["predicted_action"])
                    row["_gt"] = action_from_dict(row["gt_action"])
                    int(row["step"])
            except (ValueError, KeyError, TypeError, DatasetError) as exc:
                raise DatasetError(f"malformed trace record: {exc}", path=path, line=lineno) from None
            rows.append(row)
    return rows


def read_trace(*paths: str | os.PathLike) -> list[EpisodeTrace]:
    """Group trace lines into episodes.

    A new episode starts whenever the id changes or the step index does not
    increase, so concatenated traces are scored as the union of their episodes.
    """
    traces: list[EpisodeTrace] = []
    last_step = None
    for path in paths:
        for row in read_trace_lines(path):
            cur = traces[-1] if traces else None
            if row.get("incomplete"):
                if cur is not None and cur.episode_id == row["episode_id"]:
                    cur.complete = False
                else:
                    traces.append(EpisodeTrace(row["episode_id"], [], complete=False))
                last_step = None
                continue
            step = int(row["step"])
            if cur is None or cur.episode_id != row["episode_id"] or last_step is None \
                    or step <= last_step or not cur.complete:
                cur = EpisodeTrace(row["episode_id"])
                traces.append(cur)
            cur.steps.append(TraceStep(row["_pred"], row["_gt"]))
            last_step = step
    return traces


def completed_episode_ids(path: str | os.PathLike) -> set[str]:
    return {t.episode_id for t in read_trace(path) if t.complete}
