"""Synthetic corpora and a scripted "oracle" model for fixtures.

The oracle knows the corpus it answers for and locates each request by
the screenshots attached to it, which makes its answers plausible
(descriptions match the ground-truth actions, decisions are right most of
the time) while staying a pure function of the request. Recording it with
:class:`~chainmem.backend.RecordingBackend` yields mock scripts that
replay without the oracle.
"""

from __future__ import annotations

import hashlib
import random
import struct
import zlib
from dataclasses import replace
from pathlib import Path

from .backend import FunctionBackend, ModelRequest
from .episodes import (Action, Click, CoMAnnotations, Episode, Home, Scroll, Step, Stop, Type,
                       SCROLL_DIRECTIONS, format_action)
from .memory import StorageDecision

APPS = ("Chrome", "Twitter", "Gmail", "Amazon", "YouTube", "Maps", "Calendar", "Notes",
        "Spotify", "Settings")
LAUNCHER = "Launcher"
ITEMS = ("laptop", "headphones", "coffee shop", "concert tickets", "running shoes",
         "museum", "pizza place", "weather forecast", "train schedule", "camera")
DEVICES = ("Pixel 7", "Pixel 8 Pro", "Galaxy S23", "Pixel Tablet")
CATEGORIES = ("Social", "Tool", "Media", "Information", "Shopping", "Multi_Apps")
ELEMENTS = ("search bar", "Search button", "first result", "Share button", "Post button",
            "Compose button", "menu icon", "Send button", "product card", "Back arrow")


def _rng(*key) -> random.Random:
    h = hashlib.sha256("\x1f".join(map(str, key)).encode()).digest()
    return random.Random(int.from_bytes(h[:8], "big"))


def split_total(total: int, n: int, rng: random.Random, minimum: int = 3) -> list[int]:
    """``n`` positive lengths, each >= ``minimum``, summing exactly to ``total``."""
    if total < n * minimum:
        raise ValueError(f"cannot split {total} steps into {n} episodes of >= {minimum}")
    lengths = [total // n + (i < total % n) for i in range(n)]
    for _ in range(4 * n):
        i, j = rng.randrange(n), rng.randrange(n)
        k = rng.randint(0, 6)
        if i != j and lengths[i] - k >= minimum:
            lengths[i] -= k
            lengths[j] += k
    return lengths


def _action(rng: random.Random, item: str) -> Action:
    r = rng.random()
    if r < 0.6:
        return Click(round(rng.uniform(0.05, 0.95), 4), round(rng.uniform(0.05, 0.95), 4))
    if r < 0.8:
        return Scroll(rng.choice(SCROLL_DIRECTIONS))
    return Type(rng.choice((item, f"best {item}", f"{item} near me", f"{item} reviews")))


def make_episode(rng: random.Random, eid: str, length: int,
                 annotate: bool = False) -> Episode:
    if length < 2:
        raise ValueError("episodes need at least 2 steps")
    n_apps = max(1, min(rng.randint(1, 3), (length - 1) // 3))
    apps = rng.sample(APPS, n_apps)
    item = rng.choice(ITEMS)
    # HOME positions split the non-terminal steps into one segment per app
    body = length - 1
    cuts = sorted(rng.sample(range(2, body), n_apps - 1)) if n_apps > 1 else []
    actions: list[Action] = []
    labels: list[str] = []
    seg = 0
    for t in range(body):
        if t in cuts:
            seg += 1
        app = apps[seg]
        if t + 1 in cuts:
            actions.append(Home())
        elif t == 0 or t in cuts:
            actions.append(Click(round(rng.uniform(0.1, 0.9), 4), round(rng.uniform(0.1, 0.9), 4)))
        else:
            actions.append(_action(rng, item))
        labels.append(LAUNCHER if t in cuts else app)
    actions.append(Stop())
    labels.append(apps[-1])
    if len(apps) > 1:
        instruction = (f"Look up the {item} in {apps[0]} and share what you find using "
                       + ", then ".join(apps[1:]) + ".")
    else:
        instruction = f"Find information about the {item} in {apps[0]}."
    steps = []
    for t, (a, app) in enumerate(zip(actions, labels)):
        steps.append(Step(t, f"screens/{eid}/step_{t:02d}.png", a, app,
                          _random_annotations(rng, t, app, item) if annotate else None))
    meta = {"device": rng.choice(DEVICES), "category": rng.choice(CATEGORIES)}
    return Episode(eid, instruction, tuple(steps), meta)


def _random_annotations(rng: random.Random, t: int, app: str, item: str) -> CoMAnnotations | None:
    if rng.random() < 0.15:
        return None
    store = rng.random() < 0.3
    ann = CoMAnnotations(
        action_result="Task started." if t == 0 else f"Opened the {item} page in {app}.",
        screen_info=f"{app} lists the {item} for ${rng.randint(5, 999)}.",
        ltm_decision=StorageDecision(store, f"{item} price ${rng.randint(5, 999)}" if store else ""),
        stm_snapshot=tuple(f"result {i}" for i in range(rng.randint(1, 4))),
        ltm_snapshot=tuple((a, f"{item} note {i}") for i, a in
                           enumerate(rng.sample(APPS, rng.randint(0, 3)))),
    )
    # drop a random subset of fields to exercise optionality
    drop = {f: None for f in ann.__dataclass_fields__ if rng.random() < 0.2}
    return replace(ann, **drop)


def make_corpus(seed: int, n_episodes: int = 10, mean_steps: float = 15.4,
                annotate: bool = False) -> list[Episode]:
    rng = random.Random(seed)
    total = round(n_episodes * mean_steps)
    lengths = split_total(total, n_episodes, rng)
    return [make_episode(rng, f"ep{i:03d}", n, annotate) for i, n in enumerate(lengths)]


# -- screenshots -------------------------------------------------------------

def tiny_png(rgb: tuple[int, int, int], size: int = 8) -> bytes:
    def chunk(kind: bytes, data: bytes) -> bytes:
        body = kind + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    row = b"\x00" + bytes(rgb) * size
    ihdr = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(row * size, 9)) + chunk(b"IEND", b""))


def write_screens(episodes: list[Episode], root: str | Path) -> None:
    root = Path(root)
    for e in episodes:
        for s in e.steps:
            path = root / s.screenshot
            path.parent.mkdir(parents=True, exist_ok=True)
            r = _rng(e.id, s.index)
            path.write_bytes(tiny_png((r.randrange(256), r.randrange(256), r.randrange(256))))


# -- oracle model ------------------------------------------------------------

class SyntheticOracle:
    """Answers every pipeline prompt for a known corpus."""

    def __init__(self, episodes: list[Episode], accuracy: float = 0.85) -> None:
        self.accuracy = accuracy
        self._by_ref: dict[str, tuple[Episode, int]] = {}
        for e in episodes:
            for s in e.steps:
                self._by_ref[s.screenshot] = (e, s.index)

    def backend(self) -> FunctionBackend:
        return FunctionBackend(self)

    def _locate(self, req: ModelRequest) -> tuple[Episode | None, int]:
        refs = [p.ref for p in req.images]
        if not refs:
            return None, -1
        return self._by_ref.get(refs[-1], (None, -1))

    def __call__(self, req: ModelRequest) -> list[str]:
        n = req.decoding.n
        episode, t = self._locate(req)
        digest = req.digest()
        stage = req.stage
        if stage == "judge":
            score = _rng(digest).randint(1, 10)
            return [f"score: {score}"] * n
        if stage == "ltm_evaluate":
            return [self._ltm(req, digest, i) for i in range(n)]
        if episode is None:
            raise ValueError(f"oracle cannot place {stage} request")
        step = episode.steps[t]
        item = next((w for w in ITEMS if w in episode.instruction), "item")
        if stage == "detect_target":
            return [f"the {_rng(digest).choice(ELEMENTS)}"] * n
        if stage == "detect_app":
            return [step.app or "Unknown"] * n
        if stage == "compare":
            prev = episode.steps[t - 1].gt_action
            base = _describe(prev, step.app or "", item)
            return [base if i == 0 else f"{base} (variant {i})" for i in range(n)]
        if stage == "screen_info":
            price = _rng(episode.id, t, "price").randint(5, 999)
            base = f"{step.app} shows the {item} listed at ${price} with a 4.{t % 10} star rating."
            return [base if i == 0 else f"{base} Variant {i}." for i in range(n)]
        if stage == "decide":
            return [self._decide(step.gt_action, digest, item)] * n
        raise ValueError(f"oracle has no answer for stage {stage!r}")

    def _ltm(self, req: ModelRequest, digest: str, i: int) -> str:
        r = _rng(digest, i)
        text = req.prompt_text
        if "Launcher" in text or r.random() < 0.6:
            return "store: no\ncontent:"
        price = "$" + text.split("$", 1)[1].split()[0].rstrip(".") if "$" in text else "unknown"
        return f"store: yes\ncontent: price {price}"

    def _decide(self, gt: Action, digest: str, item: str) -> str:
        r = _rng(digest, "decide")
        if r.random() < self.accuracy:
            choice = gt
            if isinstance(gt, Click):
                choice = Click(min(1.0, round(gt.x + r.uniform(-0.05, 0.05), 2)),
                               min(1.0, max(0.0, round(gt.y + r.uniform(-0.05, 0.05), 2))))
        else:
            choice = r.choice([Click(round(r.random(), 2), round(r.random(), 2)), Home(), Stop(),
                               Scroll(r.choice(SCROLL_DIRECTIONS)), Type(f"{item} price")])
        line = format_action(choice)
        style = r.random()
        if style < 0.15:
            return f"The task needs one more step here.\n{line}"
        if style < 0.2:
            return f"Action: {line}"
        return line


def _describe(prev: Action, app: str, item: str) -> str:
    where = app if app and app != LAUNCHER else "the home screen"
    if isinstance(prev, Click):
        return f"Tapped an element and {where} now shows a new view."
    if isinstance(prev, Scroll):
        return f"Scrolled {prev.direction} in {where}, revealing more content."
    if isinstance(prev, Type):
        return f"Entered the query about the {item} in {where}."
    if isinstance(prev, Home):
        return "Returned to the home screen to switch apps."
    return f"Performed an action in {where}."
