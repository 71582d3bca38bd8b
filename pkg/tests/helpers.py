"""Checks shared by the unit and acceptance suites."""

from __future__ import annotations

import json
from dataclasses import replace

from chainmem.episodes import Click, Episode, Home, Scroll, Stop, Type, action_to_dict, format_action
from chainmem.orchestrator import StepOutcome

# HOME and STOP are part of the grammar text every decision prompt lists, so
# only argument-bearing commands can be detected by a substring scan; the
# mutation check below covers the rest.
SCANNABLE = (Click, Type, Scroll)


def peeks(out: StepOutcome) -> bool:
    """True if the decision prompt contains the current ground-truth action."""
    gt = out.gt_action
    if not isinstance(gt, SCANNABLE):
        return False
    prompt = out.decision_prompt
    return format_action(gt) in prompt or json.dumps(action_to_dict(gt)) in prompt


def mutate_from(episode: Episode, t: int) -> Episode:
    """Swap every ground-truth action from step ``t`` on for a different one."""
    swap = {Click: Scroll("up"), Scroll: Type("zz mutated"), Type: Click(0.01, 0.99),
            Home: Click(0.02, 0.98), Stop: Home()}
    steps = list(episode.steps)
    for i in range(t, len(steps)):
        steps[i] = replace(steps[i], gt_action=swap[type(steps[i].gt_action)])
    return replace(episode, steps=tuple(steps))


# -- independent metric recount ----------------------------------------------

def random_trace_set(rng, max_episodes=8, max_len=20):
    """Random (pred, gt) episodes with near-miss clicks, typos and HOME steps."""
    from chainmem.evaluation import EpisodeTrace, TraceStep

    words = ["best laptop", "coffee near me", "tickets", "weather"]
    traces = []
    for e in range(rng.randint(1, max_episodes)):
        steps = []
        for _ in range(rng.randint(1, max_len)):
            kind = rng.choice("CTSHP")
            if kind == "C":
                gt = Click(rng.random(), rng.random())
                r = rng.random()
                pred = Click(min(1, max(0, gt.x + rng.uniform(-0.2, 0.2))),
                             min(1, max(0, gt.y + rng.uniform(-0.2, 0.2)))) if r < 0.8 else Home()
            elif kind == "T":
                gt = Type(rng.choice(words))
                pred = Type(rng.choice([gt.text, gt.text.upper(), gt.text[:3], "zzz", gt.text + " x"]))
            elif kind == "S":
                gt = Scroll(rng.choice(["up", "down"]))
                pred = Scroll(rng.choice(["up", "down"]))
            elif kind == "H":
                gt = Home()
                pred = rng.choice([Home(), Home(), Stop()])
            else:
                gt = Stop()
                pred = rng.choice([Stop(), Home()])
            steps.append(TraceStep(pred, gt))
        traces.append(EpisodeTrace(f"e{e}", steps))
    return traces


def _edit(a: str, b: str) -> int:
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


def naive_match(pred, gt, radius=0.14, threshold=0.5) -> bool:
    if pred.tag != gt.tag:
        return False
    if gt.tag == "CLICK":
        return ((pred.x - gt.x) ** 2 + (pred.y - gt.y) ** 2) ** 0.5 <= radius
    if gt.tag == "TYPE":
        p = " ".join(pred.text.casefold().split())
        g = " ".join(gt.text.casefold().split())
        n = max(len(p), len(g))
        return n == 0 or 1 - _edit(p, g) / n >= threshold
    if gt.tag == "SCROLL":
        return pred.direction == gt.direction
    return True


def naive_metrics(traces):
    """AMS, SR and TSS recounted step by step."""
    steps = hits = full = homes = wins = 0
    for t in traces:
        ok = [naive_match(s.pred, s.gt) for s in t.steps]
        steps += len(ok)
        hits += ok.count(True)
        full += all(ok)
        for i, s in enumerate(t.steps):
            if s.gt.tag == "HOME":
                homes += 1
                nxt = ok[i + 1] if i + 1 < len(ok) else True
                wins += ok[i] and nxt
    return (100 * hits / steps, 100 * full / len(traces),
            100 * wins / homes if homes else None)
