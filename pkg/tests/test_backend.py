import base64
import json

import pytest

from chainmem.backend import (AuthenticationError, Decoding, FunctionBackend, ImagePart, MockBackend, ModelRequest,
                              OpenAICompatibleBackend, RecordingBackend, ResponseShapeError,
                              ScriptEntry, ScriptMiss, TransportError, from_wire, greedy,
                              load_script, simple_request, to_wire)
from chainmem.synth import tiny_png

from stub_server import StubServer


def client(stub, **kw):
    kw.setdefault("sleep", lambda s: None)
    return OpenAICompatibleBackend(stub.url, "test-model", "sekret", **kw)


def test_retry_then_success():
    with StubServer([500, 500, 200]) as stub:
        resp = client(stub).complete(simple_request("hi"))
    assert resp.choices == ["ok 0"]
    assert len(stub.requests) == 3


def test_gives_up_after_max_attempts():
    delays = []
    with StubServer([500] * 4) as stub:
        with pytest.raises(TransportError, match="3 attempts"):
            client(stub, sleep=delays.append).complete(simple_request("hi"))
    assert len(stub.requests) == 3
    assert delays == [0.5, 1.0]


def test_rate_limit_is_retried():
    with StubServer([429, 200]) as stub:
        assert greedy(client(stub), simple_request("hi")) == "ok 0"


@pytest.mark.parametrize("status", [401, 403])
def test_auth_failure_not_retried(status):
    with StubServer([status, 200]) as stub:
        with pytest.raises(AuthenticationError):
            client(stub).complete(simple_request("hi"))
    assert len(stub.requests) == 1


def test_other_client_error_not_retried():
    with StubServer([400, 200]) as stub:
        with pytest.raises(TransportError):
            client(stub).complete(simple_request("hi"))
    assert len(stub.requests) == 1


def test_connection_refused_is_transport_error():
    c = OpenAICompatibleBackend("http://127.0.0.1:9", "m", max_attempts=2, sleep=lambda s: None)
    with pytest.raises(TransportError):
        c.complete(simple_request("hi"))


def test_sampling_shape_and_bearer():
    with StubServer() as stub:
        resp = client(stub).complete(simple_request("hi", decoding=Decoding(0.7, n=3)))
    assert resp.choices == ["ok 0", "ok 1", "ok 2"]
    assert stub.requests[0]["n"] == 3 and stub.requests[0]["temperature"] == 0.7
    assert stub.headers[0]["Authorization"] == "Bearer sekret"
    assert stub.requests[0]["model"] == "test-model"


def test_wrong_choice_count_is_shape_error():
    with StubServer() as stub:
        stub.choice_count = 1
        with pytest.raises(ResponseShapeError):
            client(stub).complete(simple_request("hi", decoding=Decoding(0.7, n=3)))


def test_greedy_payload():
    with StubServer() as stub:
        greedy(client(stub), simple_request("hi", decoding=Decoding(0.9, n=5)))
    assert stub.requests[0]["temperature"] == 0
    assert stub.requests[0]["n"] == 1


def test_images_are_base64_with_media_type(tmp_path):
    png = tiny_png((1, 2, 3))
    (tmp_path / "s.png").write_bytes(png)
    (tmp_path / "s.jpg").write_bytes(b"\xff\xd8fake")
    req = simple_request("look", ImagePart("s.png", str(tmp_path)), ImagePart("s.jpg", str(tmp_path)),
                         ImagePart("https://example.org/x.png"))
    with StubServer() as stub:
        client(stub).complete(req)
    parts = stub.requests[0]["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "look"}
    url = parts[1]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    assert base64.b64decode(url.split(",", 1)[1]) == png
    assert parts[2]["image_url"]["url"].startswith("data:image/jpeg;base64,")
    assert parts[3]["image_url"]["url"] == "https://example.org/x.png"


def test_wire_round_trip():
    req = simple_request("hello", ImagePart("https://e.org/a.png"), decoding=Decoding(0.3, 64, 2))
    payload = to_wire(req, "m")
    back, model = from_wire(payload)
    assert model == "m" and back == req
    assert to_wire(back, model) == payload


def test_digest_ignores_root_and_decoding():
    a = simple_request("x", ImagePart("s/1.png", "/one"))
    b = simple_request("x", ImagePart("s/1.png", "/two"), decoding=Decoding(0.7, n=3))
    assert a.digest() == b.digest()
    assert a.digest() != simple_request("y", ImagePart("s/1.png")).digest()


# -- mock --------------------------------------------------------------------

def test_mock_digest_lookup_and_greedy_determinism():
    req = simple_request("prompt A")
    mock = MockBackend([ScriptEntry(["X", "Y"], digest=req.digest())])
    assert greedy(mock, req) == "X"
    assert greedy(mock, req) == "X"


def test_mock_sampling_cycles():
    req = simple_request("p", decoding=Decoding(0.7, n=3))
    mock = MockBackend([ScriptEntry(["a", "b", "c"], digest=req.digest())])
    assert mock.complete(req).choices == ["a", "b", "c"]
    two = simple_request("p", decoding=Decoding(0.7, n=2))
    mock = MockBackend([ScriptEntry(["a", "b", "c"], digest=req.digest())])
    assert mock.complete(two).choices == ["a", "b"]
    assert mock.complete(two).choices == ["c", "a"]


def test_mock_patterns_and_miss():
    mock = MockBackend.from_patterns({r"score": "score: 9"})
    assert greedy(mock, simple_request("give a score")) == "score: 9"
    with pytest.raises(ScriptMiss):
        greedy(mock, simple_request("nothing"))
    assert greedy(MockBackend(default="d"), simple_request("nothing")) == "d"


def test_script_file_format(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"digest": "ab", "responses": ["x"]}) + "\n"
                    + json.dumps({"pattern": "^hi", "responses": ["y", "z"]}) + "\n")
    entries = load_script(path)
    assert entries[0].digest == "ab" and entries[1].pattern.pattern == "^hi"
    path.write_text('{"digest": "ab", "responses": []}\n')
    with pytest.raises(ValueError, match=":1"):
        load_script(path)


def test_record_then_replay(tmp_path):
    answers = iter(f"r{i}" for i in range(100))
    live = FunctionBackend(lambda req: [next(answers) for _ in range(req.decoding.n)])
    rec = RecordingBackend(live)
    reqs = [simple_request("one"), simple_request("two", decoding=Decoding(0.7, n=3)),
            simple_request("one")]
    first = [rec.complete(r).choices for r in reqs]
    path = tmp_path / "rec.jsonl"
    rec.dump(path)
    replay = MockBackend.from_file(path)
    assert [replay.complete(r).choices for r in reqs] == [first[0], first[1], first[0]]
    lines = path.read_text().splitlines()
    assert [json.loads(l)["digest"] for l in lines] == sorted(json.loads(l)["digest"] for l in lines)


def test_call_log(eval_mock, episodes):
    req = ModelRequest(simple_request("x").messages, stage="decide")
    with pytest.raises(ScriptMiss):
        eval_mock.complete(req)
    assert eval_mock.stages() == ["decide"] and eval_mock.call_count == 1
