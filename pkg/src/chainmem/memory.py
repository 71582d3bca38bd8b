"""Short-term and long-term memory values.

Both memories are immutable; every update returns a new value and leaves
its input untouched, so a memory lineage can be snapshotted at any step
simply by keeping a reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

DEFAULT_STM_CAPACITY = 4

EMPTY_STM_TEXT = "No prior actions."
EMPTY_LTM_TEXT = "No stored information."


class MemoryInvariantError(ValueError):
    """Raised when a memory update would break a memory invariant."""


@dataclass(frozen=True)
class ActionResult:
    step_index: int
    text: str

    def __post_init__(self) -> None:
        if self.step_index < 0:
            raise MemoryInvariantError(f"step_index must be non-negative, got {self.step_index}")
        if not self.text.strip():
            raise MemoryInvariantError("action result text is empty")


@dataclass(frozen=True)
class ShortTermMemory:
    entries: tuple[ActionResult, ...] = ()
    capacity: int = DEFAULT_STM_CAPACITY

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise MemoryInvariantError(f"capacity must be positive, got {self.capacity}")
        if len(self.entries) > self.capacity:
            raise MemoryInvariantError(
                f"{len(self.entries)} entries exceed capacity {self.capacity}"
            )
        steps = [e.step_index for e in self.entries]
        if any(a >= b for a, b in zip(steps, steps[1:])):
            raise MemoryInvariantError(f"entries are not strictly increasing by step: {steps}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.entries]


@dataclass(frozen=True)
class LtmEntry:
    app: str
    content: str
    step_index: int = 0

    def __post_init__(self) -> None:
        if not self.app.strip():
            raise MemoryInvariantError("LTM entry app label is empty")
        if not self.content.strip():
            raise MemoryInvariantError("LTM entry content is empty")


@dataclass(frozen=True)
class LongTermMemory:
    entries: tuple[LtmEntry, ...] = ()

    def __post_init__(self) -> None:
        for a, b in zip(self.entries, self.entries[1:]):
            if _same_app(a.app, b.app):
                raise MemoryInvariantError(f"consecutive LTM entries share app {a.app!r}")
            if b.step_index < a.step_index:
                raise MemoryInvariantError("LTM entries are not ordered by step")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class StorageDecision:
    store: bool
    content: str = field(default="")

    def __post_init__(self) -> None:
        if self.store and not self.content.strip():
            raise MemoryInvariantError("store=true requires non-empty content")
        if not self.store and self.content:
            # content is meaningless without the store flag
            object.__setattr__(self, "content", "")


NO_STORE = StorageDecision(False, "")


def _same_app(a: str, b: str) -> bool:
    return a.strip() == b.strip()


def stm_update(stm: ShortTermMemory, result: ActionResult) -> ShortTermMemory:
    """Append ``result`` and evict the oldest entry once capacity is exceeded."""
    if stm.entries and result.step_index <= stm.entries[-1].step_index:
        raise MemoryInvariantError(
            f"step_index {result.step_index} does not follow "
            f"{stm.entries[-1].step_index}"
        )
    entries = stm.entries + (result,)
    if len(entries) > stm.capacity:
        entries = entries[-stm.capacity:]
    return ShortTermMemory(entries, stm.capacity)


def ltm_update(
    ltm: LongTermMemory, decision: StorageDecision, app: str, step_index: int = 0
) -> LongTermMemory:
    """Store ``decision.content`` under ``app``.

    A store for the same app as the last entry overwrites that entry;
    any other app appends. ``store=False`` returns ``ltm`` itself.
    """
    if not app.strip():
        raise MemoryInvariantError("app label is empty")
    if not decision.store:
        return ltm
    if not decision.content.strip():
        raise MemoryInvariantError("store=true requires non-empty content")
    entry = LtmEntry(app.strip(), decision.content, step_index)
    if ltm.entries and _same_app(ltm.entries[-1].app, app):
        return LongTermMemory(ltm.entries[:-1] + (entry,))
    return LongTermMemory(ltm.entries + (entry,))


def render_stm(stm: ShortTermMemory) -> str:
    if not stm.entries:
        return EMPTY_STM_TEXT
    return "\n".join(f"{i}. {e.text}" for i, e in enumerate(stm.entries, 1))


def render_ltm(ltm: LongTermMemory) -> str:
    if not ltm.entries:
        return EMPTY_LTM_TEXT
    return "\n".join(f"[{e.app}] {e.content}" for e in ltm.entries)
