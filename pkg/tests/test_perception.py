import pytest

from chainmem.backend import FunctionBackend, MockBackend
from chainmem.episodes import Click, Scroll, Step, Stop
from chainmem.memory import ShortTermMemory, StorageDecision
from chainmem.perception import (ScreenInfo, ScreenRef, StageError, detect_app,
                                 detect_click_target, evaluate_for_ltm, extract_screen_info,
                                 parse_storage_decision, summarize_action_result)

PREV = ScreenRef("e/0.png", 0)
CUR = ScreenRef("e/1.png", 1)


def scripted(*replies):
    it = iter(replies)
    return FunctionBackend(lambda req: [next(it)])


def test_non_click_makes_no_call():
    backend = MockBackend(default="x")
    assert detect_click_target(backend, PREV, Scroll("up")) is None
    assert backend.call_count == 0


def test_click_target_passthrough():
    backend = MockBackend.from_patterns({"x=0.50, y=0.90": "Search button\n"})
    target = detect_click_target(backend, PREV, Click(0.5, 0.9))
    assert target.description == "Search button"
    assert backend.stages() == ["detect_target"]


def test_click_target_uses_previous_screen():
    seen = []
    backend = FunctionBackend(lambda req: seen.append([i.ref for i in req.images]) or ["tab"])
    detect_click_target(backend, PREV, Click(0.1, 0.2))
    assert seen == [["e/0.png"]]


def test_action_result_scripted():
    seen = []
    backend = FunctionBackend(lambda req: seen.append([i.ref for i in req.images])
                              or ["Opened the Twitter app"])
    r = summarize_action_result(backend, None, Click(0.1, 0.1), CUR, PREV)
    assert r.text == "Opened the Twitter app" and r.step_index == 1
    assert seen == [["e/0.png", "e/1.png"]]


def test_first_step_is_fixed():
    backend = MockBackend()
    r = summarize_action_result(backend, None, None, ScreenRef("e/0.png", 0), None)
    assert r.text == "Task started." and backend.call_count == 0


def test_empty_action_result_retried_then_fails():
    assert summarize_action_result(scripted("", "done"), None, Stop(), CUR, PREV).text == "done"
    with pytest.raises(StageError) as info:
        summarize_action_result(scripted("", " "), None, Stop(), CUR, PREV)
    assert info.value.stage == "compare"


def test_backend_failure_is_labeled():
    with pytest.raises(StageError) as info:
        summarize_action_result(MockBackend(), None, Stop(), CUR, PREV)
    assert info.value.stage == "compare" and info.value.backend_failure


def test_screen_info():
    prompts = []
    backend = FunctionBackend(lambda req: prompts.append(req.prompt_text) or ["tweet: hello"])
    info = extract_screen_info(backend, "share the tweet", CUR, ShortTermMemory())
    assert info.text == "tweet: hello"
    assert "No prior actions." in prompts[0]


@pytest.mark.parametrize("text,expected", [
    ("store: no", StorageDecision(False)),
    ("store: yes\ncontent: laptop price $999", StorageDecision(True, "laptop price $999")),
    ("Store: YES / content: laptop price $999", StorageDecision(True, "laptop price $999")),
])
def test_parse_storage_decision(text, expected):
    assert parse_storage_decision(text) == expected


@pytest.mark.parametrize("text", ["maybe", "store: yes\ncontent:", ""])
def test_parse_storage_decision_rejects(text):
    with pytest.raises(ValueError):
        parse_storage_decision(text)


def test_evaluate_retries_with_reminder():
    prompts = []
    replies = iter(["hmm", "store: yes\ncontent: $5"])
    backend = FunctionBackend(lambda req: prompts.append(req.prompt_text) or [next(replies)])
    d = evaluate_for_ltm(backend, "q", ShortTermMemory(), ScreenInfo("price $5"))
    assert d == StorageDecision(True, "$5")
    assert "Reminder" not in prompts[0] and "Reminder" in prompts[1]
    with pytest.raises(StageError) as info:
        evaluate_for_ltm(scripted("a", "b"), "q", ShortTermMemory(), ScreenInfo("x"))
    assert info.value.stage == "ltm_evaluate" and not info.value.backend_failure


def test_detect_app():
    backend = MockBackend(default="Gmail")
    assert detect_app(Step(0, "s.png", Stop(), "Chrome"), backend) == "Chrome"
    assert backend.call_count == 0
    assert detect_app(Step(0, "s.png", Stop(), None), backend) == "Gmail"
    assert backend.stages() == ["detect_app"]
    with pytest.raises(StageError, match="app unknown"):
        detect_app(Step(0, "s.png", Stop(), None))
