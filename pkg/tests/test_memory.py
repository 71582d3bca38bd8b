import pytest
from hypothesis import given, strategies as st

from chainmem.memory import (EMPTY_LTM_TEXT, EMPTY_STM_TEXT, NO_STORE, ActionResult,
                             LongTermMemory, LtmEntry, MemoryInvariantError, ShortTermMemory,
                             StorageDecision, ltm_update, render_ltm, render_stm, stm_update)


def fill(texts, capacity=4):
    stm = ShortTermMemory((), capacity)
    for i, t in enumerate(texts):
        stm = stm_update(stm, ActionResult(i, t))
    return stm


def test_insert_into_empty():
    stm = stm_update(ShortTermMemory(), ActionResult(0, "Opened Chrome"))
    assert stm.texts == ["Opened Chrome"]


def test_oldest_is_evicted():
    assert fill(["r1", "r2", "r3", "r4", "r5"]).texts == ["r2", "r3", "r4", "r5"]


def test_ten_inserts_keep_last_four():
    assert fill([f"r{i}" for i in range(1, 11)]).texts == ["r7", "r8", "r9", "r10"]


def test_stm_update_is_pure():
    before = fill(["a", "b"])
    after = stm_update(before, ActionResult(5, "c"))
    assert before.texts == ["a", "b"]
    assert after.texts == ["a", "b", "c"]


def test_stm_rejects_non_increasing_steps():
    stm = stm_update(ShortTermMemory(), ActionResult(3, "x"))
    with pytest.raises(MemoryInvariantError):
        stm_update(stm, ActionResult(3, "y"))


@pytest.mark.parametrize("bad", [
    lambda: ShortTermMemory((), 0),
    lambda: ShortTermMemory(tuple(ActionResult(i, "x") for i in range(5)), 4),
    lambda: ShortTermMemory((ActionResult(2, "a"), ActionResult(1, "b"))),
    lambda: ActionResult(0, "  "),
    lambda: ActionResult(-1, "x"),
])
def test_stm_construction_invariants(bad):
    with pytest.raises(MemoryInvariantError):
        bad()


def test_ltm_examples():
    one = ltm_update(LongTermMemory(), StorageDecision(True, "price $999"), "Chrome")
    assert [(e.app, e.content) for e in one.entries] == [("Chrome", "price $999")]
    replaced = ltm_update(one, StorageDecision(True, "price $999, 4.8 stars"), "Chrome")
    assert [(e.app, e.content) for e in replaced.entries] == [("Chrome", "price $999, 4.8 stars")]
    two = ltm_update(one, StorageDecision(True, "tweet text"), "Twitter")
    assert len(two) == 2 and two.entries[-1].app == "Twitter"
    assert ltm_update(one, NO_STORE, "Gmail") is one


def test_ltm_app_equality_is_trimmed_and_case_sensitive():
    ltm = ltm_update(LongTermMemory(), StorageDecision(True, "a"), "Chrome")
    assert len(ltm_update(ltm, StorageDecision(True, "b"), " Chrome ")) == 1
    assert len(ltm_update(ltm, StorageDecision(True, "b"), "chrome")) == 2


def test_ltm_rejects_adjacent_same_app():
    with pytest.raises(MemoryInvariantError):
        LongTermMemory((LtmEntry("A", "x"), LtmEntry("A", "y")))


def test_storage_decision():
    with pytest.raises(MemoryInvariantError):
        StorageDecision(True, " ")
    assert StorageDecision(False, "ignored").content == ""


def test_rendering():
    assert render_stm(ShortTermMemory()) == EMPTY_STM_TEXT == "No prior actions."
    stm = fill(["first", "second"])
    assert render_stm(stm) == "1. first\n2. second"
    assert render_stm(stm) == render_stm(stm)
    assert render_ltm(LongTermMemory()) == EMPTY_LTM_TEXT == "No stored information."
    ltm = LongTermMemory((LtmEntry("Chrome", "a"), LtmEntry("Twitter", "b")))
    assert render_ltm(ltm) == "[Chrome] a\n[Twitter] b"


# -- laws --------------------------------------------------------------------

@given(st.lists(st.text(min_size=1).filter(str.strip), max_size=50), st.integers(1, 8))
def test_stm_is_keep_last_n(texts, capacity):
    stm = fill(texts, capacity)
    assert stm.texts == texts[-capacity:] if texts else stm.texts == []
    assert len(stm) == min(len(texts), capacity)


ops = st.lists(st.tuples(st.booleans(), st.sampled_from(["A", "B", "C"]),
                         st.text(min_size=1).filter(str.strip)), max_size=40)


@given(ops)
def test_ltm_laws(seq):
    ltm = LongTermMemory()
    for t, (store, app, content) in enumerate(seq):
        before = ltm
        ltm = ltm_update(ltm, StorageDecision(store, content), app, t)
        if not store:
            assert ltm == before
        elif before.entries and before.entries[-1].app == app:
            assert len(ltm) == len(before)
            assert ltm.entries[-1].content == content
        else:
            assert len(ltm) == len(before) + 1
        apps = [e.app for e in ltm.entries]
        assert all(a != b for a, b in zip(apps, apps[1:]))
