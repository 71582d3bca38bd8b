import json
import random

import pytest

from chainmem.episodes import (Click, CoMAnnotations, DatasetError, Episode, Home, Other, Scroll,
                               Step, Stop, Type, action_from_dict, action_to_dict, format_action,
                               load_dataset, save_annotated, validate_episode)
from chainmem.memory import StorageDecision
from chainmem.synth import make_corpus, make_episode


def tiny(actions, **kw) -> Episode:
    steps = tuple(Step(i, f"s{i}.png", a, "Chrome") for i, a in enumerate(actions))
    return Episode(kw.get("id", "e1"), "find a laptop", steps, {})


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def raw_episode(**step0):
    step = {"index": 0, "screenshot": "a.png", "app": "Chrome", "action": {"type": "STOP"}}
    step.update(step0)
    return {"id": "e1", "instruction": "q", "meta": {}, "steps": [step]}


def test_single_episode_three_steps(tmp_path):
    e = tiny([Click(0.5, 0.5), Type("laptop"), Stop()])
    save_annotated([e], tmp_path / "d.jsonl")
    loaded = load_dataset(tmp_path / "d.jsonl")
    assert len(loaded) == 1 and len(loaded[0].steps) == 3
    assert loaded[0] == e


def test_click_out_of_range_names_field(tmp_path):
    write_lines(tmp_path / "d.jsonl", [raw_episode(action={"type": "CLICK", "x": 1.3, "y": 0.2})])
    with pytest.raises(DatasetError) as info:
        load_dataset(tmp_path / "d.jsonl")
    msg = str(info.value)
    assert "x out of [0,1]" in msg
    assert "d.jsonl" in msg and ":1" in msg
    assert info.value.field == "steps[0].x"


def test_non_contiguous_indices_rejected(tmp_path):
    d = raw_episode()
    d["steps"].append({"index": 2, "screenshot": "b.png", "action": {"type": "STOP"}})
    write_lines(tmp_path / "d.jsonl", [d])
    with pytest.raises(DatasetError, match="contiguous"):
        load_dataset(tmp_path / "d.jsonl")


def test_unknown_action_loads_as_other(tmp_path):
    a = action_from_dict({"type": "LONG_PRESS", "x": 0.1, "y": 0.2})
    assert isinstance(a, Other) and a.name == "LONG_PRESS"
    assert action_to_dict(a) == {"type": "LONG_PRESS", "x": 0.1, "y": 0.2}


def test_complete_is_stop():
    assert action_from_dict({"type": "COMPLETE"}) == Stop()


def test_format_action():
    assert format_action(Click(0.5, 0.9)) == "CLICK 0.50 0.90"
    assert format_action(Scroll("up")) == "SCROLL UP"
    assert format_action(Home()) == "HOME"
    assert format_action(Type("best laptop")) == "TYPE best laptop"


def test_synthetic_corpus_scale(tmp_path):
    corpus = make_corpus(seed=3, n_episodes=20, mean_steps=15.4)
    save_annotated(corpus, tmp_path / "c.jsonl")
    loaded = load_dataset(tmp_path / "c.jsonl")
    assert len(loaded) == 20
    assert sum(len(e.steps) for e in loaded) == 308


def test_directory_of_files(tmp_path):
    save_annotated([tiny([Stop()], id="a")], tmp_path / "1.jsonl")
    save_annotated([tiny([Stop()], id="b")], tmp_path / "2.jsonl")
    assert [e.id for e in load_dataset(tmp_path)] == ["a", "b"]


def test_missing_screenshot_is_only_a_warning(tmp_path):
    save_annotated([tiny([Stop()])], tmp_path / "d.jsonl")
    warnings = []
    assert load_dataset(tmp_path / "d.jsonl", tmp_path, warnings)
    assert warnings and "not found" in warnings[0]


# -- validation --------------------------------------------------------------

def test_well_formed_is_empty():
    r = validate_episode(tiny([Click(0.1, 0.1), Stop()]))
    assert r.ok and r.violations == [] and r.warnings == []


def test_terminal_click_flagged():
    r = validate_episode(tiny([Click(0.1, 0.1)]))
    assert "terminal action is not Stop" in r.violations


def test_stm_snapshot_capacity_flagged():
    e = tiny([Stop()])
    ann = CoMAnnotations(stm_snapshot=tuple("abcdef"))
    e = Episode(e.id, e.instruction, (Step(0, "s.png", Stop(), "Chrome", ann),), {})
    r = validate_episode(e, stm_capacity=4)
    assert any("exceeds capacity 4" in v for v in r.violations)


def test_ltm_snapshot_adjacent_apps_flagged():
    ann = CoMAnnotations(ltm_snapshot=(("Chrome", "a"), ("Chrome", "b")))
    e = Episode("e", "q", (Step(0, "s.png", Stop(), "Chrome", ann),), {})
    assert not validate_episode(e).ok


# -- round trips -------------------------------------------------------------

def test_annotation_optionality_survives(tmp_path):
    ann = CoMAnnotations(action_result="Task started.", ltm_decision=StorageDecision(False))
    e = Episode("e", "q", (Step(0, "s.png", Stop(), None, ann),
                           Step(1, "t.png", Stop(), "X", None)), {"device": "Pixel 7"})
    save_annotated([e], tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")[0]
    assert back == e
    assert back.steps[0].annotations.screen_info is None
    assert back.steps[1].annotations is None
    row = json.loads((tmp_path / "d.jsonl").read_text())
    assert "screen_info" not in row["steps"][0]["com"]
    assert "com" not in row["steps"][1]


def test_hundred_random_episodes_round_trip(tmp_path):
    rng = random.Random(11)
    corpus = [make_episode(rng, f"r{i}", rng.randint(2, 30), annotate=True) for i in range(100)]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_annotated(corpus, a)
    loaded = load_dataset(a)
    assert loaded == corpus
    save_annotated(loaded, b)
    assert a.read_bytes() == b.read_bytes()


def test_fixture_corpus_is_contiguous(episodes, annotated_episodes):
    for e in episodes + annotated_episodes:
        assert [s.index for s in e.steps] == list(range(len(e.steps)))
        assert validate_episode(e).ok
