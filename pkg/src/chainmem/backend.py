"""Model backends: an OpenAI-compatible HTTP client and deterministic mocks.

Requests are built from text and image parts. Images are referenced by path
(relative to a screens root) or URL; the HTTP client embeds local files as
base64 data URLs at send time, while prompt digests only see the reference
string, so digests are stable across machines.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

ENV_URL = "COM_BACKEND_URL"
ENV_KEY = "COM_BACKEND_KEY"
ENV_MODEL = "COM_BACKEND_MODEL"


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    pass


class AuthenticationError(BackendError):
    pass


class ResponseShapeError(BackendError):
    pass


class ScriptMiss(BackendError):
    """The mock script has no entry for a prompt."""


# -- request / response ------------------------------------------------------

@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    ref: str
    root: str | None = field(default=None, compare=False)

    @property
    def is_remote(self) -> bool:
        return self.ref.startswith(("http://", "https://", "data:"))

    def resolve(self) -> Path:
        return Path(self.root) / self.ref if self.root else Path(self.ref)


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple

    @classmethod
    def user(cls, *parts: TextPart | ImagePart | str) -> "Message":
        return cls("user", tuple(TextPart(p) if isinstance(p, str) else p for p in parts))


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_tokens: int = 512
    n: int = 1

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1 or self.n < 1:
            raise ValueError("max_tokens and n must be positive")


GREEDY = Decoding(temperature=0.0, n=1)


@dataclass(frozen=True)
class ModelRequest:
    messages: tuple[Message, ...]
    decoding: Decoding = GREEDY
    # pipeline stage, used for call logs and error labels; not sent
    stage: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a request needs at least one message")

    @property
    def prompt_text(self) -> str:
        return "\n".join(p.text for m in self.messages for p in m.parts if isinstance(p, TextPart))

    @property
    def images(self) -> list[ImagePart]:
        return [p for m in self.messages for p in m.parts if isinstance(p, ImagePart)]

    def digest(self) -> str:
        canon = [[m.role, [["text", p.text] if isinstance(p, TextPart) else ["image", p.ref]
                           for p in m.parts]] for m in self.messages]
        blob = json.dumps(canon, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class ModelResponse:
    choices: list[str]
    usage: dict = field(default_factory=dict)
    latency: float = 0.0


class Backend(Protocol):
    def complete(self, req: ModelRequest) -> ModelResponse: ...


def greedy(backend: Backend, req: ModelRequest) -> str:
    """Single deterministic completion: temperature 0, one choice."""
    req = replace(req, decoding=replace(req.decoding, temperature=0.0, n=1))
    return backend.complete(req).choices[0]


def simple_request(text: str, *images: ImagePart, stage: str = "",
                   decoding: Decoding = GREEDY) -> ModelRequest:
    return ModelRequest((Message.user(TextPart(text), *images),), decoding, stage)


# -- wire format -------------------------------------------------------------

def _image_url(part: ImagePart) -> str:
    if part.is_remote:
        return part.ref
    path = part.resolve()
    media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise BackendError(f"cannot read image {path}: {exc.strerror}") from exc
    return f"data:{media_type};base64,{base64.b64encode(data).decode('ascii')}"


def to_wire(req: ModelRequest, model: str) -> dict:
    messages = []
    for m in req.messages:
        content = []
        for p in m.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": _image_url(p)}})
        messages.append({"role": m.role, "content": content})
    return {
        "model": model,
        "messages": messages,
        "temperature": req.decoding.temperature,
        "max_tokens": req.decoding.max_tokens,
        "n": req.decoding.n,
    }


def from_wire(payload: dict) -> tuple[ModelRequest, str]:
    """Parse a chat-completions payload back into ``(request, model)``.

    Images come back as URL references, so ``to_wire(*from_wire(p))``
    reproduces ``p`` for payloads within the supported subset.
    """
    messages = []
    for m in payload["messages"]:
        content = m["content"]
        if isinstance(content, str):
            content = [{"type": "text", "text": content}]
        parts = []
        for c in content:
            if c["type"] == "text":
                parts.append(TextPart(c["text"]))
            elif c["type"] == "image_url":
                parts.append(ImagePart(c["image_url"]["url"]))
            else:
                raise ResponseShapeError(f"unsupported content part {c['type']!r}")
        messages.append(Message(m["role"], tuple(parts)))
    decoding = Decoding(float(payload.get("temperature", 0.0)),
                        int(payload.get("max_tokens", 512)), int(payload.get("n", 1)))
    return ModelRequest(tuple(messages), decoding), payload.get("model", "")


# -- HTTP client -------------------------------------------------------------

class OpenAICompatibleBackend:
    """Client for ``POST {base_url}/chat/completions``.

    Retries 5xx, 429 and connection failures with exponential backoff.
    Authentication failures are raised immediately.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        max_attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "OpenAICompatibleBackend":
        url = kwargs.pop("base_url", None) or os.environ.get(ENV_URL)
        model = kwargs.pop("model", None) or os.environ.get(ENV_MODEL)
        if not url or not model:
            raise BackendError(f"set {ENV_URL} and {ENV_MODEL} (or pass them explicitly)")
        key = kwargs.pop("api_key", None) or os.environ.get(ENV_KEY)
        return cls(url, model, key, **kwargs)

    def close(self) -> None:
        self._client.close()

    def complete(self, req: ModelRequest) -> ModelResponse:
        payload = to_wire(req, self.model)
        url = f"{self.base_url}/chat/completions"
        last_error = ""
        with self._slots:
            for attempt in range(1, self.max_attempts + 1):
                start = time.perf_counter()
                try:
                    resp = self._client.post(url, json=payload)
                except httpx.TransportError as exc:
                    last_error = f"{type(exc).__name__}: {exc}"
                else:
                    if resp.status_code in (401, 403):
                        raise AuthenticationError(f"{resp.status_code} from {url}")
                    if resp.status_code < 400:
                        return self._parse(resp, req.decoding.n, time.perf_counter() - start)
                    last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                    if resp.status_code != 429 and resp.status_code < 500:
                        raise TransportError(last_error)
                if attempt < self.max_attempts:
                    delay = self.backoff * 2 ** (attempt - 1)
                    log.warning("attempt %d/%d failed (%s), retrying in %.2fs",
                                attempt, self.max_attempts, last_error, delay)
                    self._sleep(delay)
        raise TransportError(f"giving up after {self.max_attempts} attempts: {last_error}")

    @staticmethod
    def _parse(resp: httpx.Response, n: int, latency: float) -> ModelResponse:
        try:
            body = resp.json()
            choices = [c["message"]["content"] or "" for c in body["choices"]]
        except (ValueError, KeyError, TypeError):
            raise ResponseShapeError(f"unexpected response body: {resp.text[:200]!r}") from None
        if len(choices) != n:
            raise ResponseShapeError(f"expected {n} choices, got {len(choices)}: {resp.text[:200]!r}")
        return ModelResponse(choices, body.get("usage") or {}, latency)


# -- mocks -------------------------------------------------------------------

@dataclass
class ScriptEntry:
    responses: list[str]
    digest: str | None = None
    pattern: re.Pattern | None = None

    def to_json(self) -> dict:
        d: dict = {"digest": self.digest} if self.digest else {"pattern": self.pattern.pattern}
        d["responses"] = self.responses
        return d


def load_script(path: str | os.PathLike) -> list[ScriptEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                responses = [str(r) for r in d["responses"]]
                if not responses:
                    raise ValueError("empty responses")
                if "digest" in d:
                    entries.append(ScriptEntry(responses, digest=d["digest"]))
                else:
                    entries.append(ScriptEntry(responses, pattern=re.compile(d["pattern"])))
            except (ValueError, KeyError, TypeError, re.error) as exc:
                raise ValueError(f"{path}:{lineno}: bad script entry: {exc}") from None
    return entries


@dataclass
class CallRecord:
    stage: str
    digest: str
    prompt: str
    n: int


class _CallLog:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    def _log(self, req: ModelRequest) -> None:
        with self._lock:
            self.calls.append(CallRecord(req.stage, req.digest(), req.prompt_text, req.decoding.n))

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def stages(self) -> list[str]:
        return [c.stage for c in self.calls]


class MockBackend(_CallLog):
    """Scripted backend keyed by prompt digest, with regex fallbacks.

    Greedy requests (temperature 0, n=1) always get the entry's first
    response. Sampling requests walk the response list cyclically, using a
    per-digest call ordinal, so choice ``i`` of call ``k`` is
    ``responses[(k*n + i) % len]``.
    """

    def __init__(self, entries: Iterable[ScriptEntry] = (), default: str | None = None) -> None:
        super().__init__()
        self._by_digest: dict[str, ScriptEntry] = {}
        self._patterns: list[ScriptEntry] = []
        for e in entries:
            if e.digest:
                self._by_digest[e.digest] = e
            else:
                self._patterns.append(e)
        self.default = default
        self._ordinals: dict[str, int] = defaultdict(int)

    @classmethod
    def from_file(cls, path: str | os.PathLike, **kwargs) -> "MockBackend":
        return cls(load_script(path), **kwargs)

    @classmethod
    def from_patterns(cls, mapping: dict[str, str | Sequence[str]], **kwargs) -> "MockBackend":
        entries = [ScriptEntry([v] if isinstance(v, str) else list(v), pattern=re.compile(k))
                   for k, v in mapping.items()]
        return cls(entries, **kwargs)

    def _lookup(self, req: ModelRequest, digest: str) -> list[str]:
        entry = self._by_digest.get(digest)
        if entry is None:
            text = req.prompt_text
            entry = next((e for e in self._patterns if e.pattern.search(text)), None)
        if entry is None:
            if self.default is None:
                raise ScriptMiss(f"no script entry for {req.stage or 'request'} "
                                 f"(digest {digest[:12]})")
            return [self.default]
        return entry.responses

    def complete(self, req: ModelRequest) -> ModelResponse:
        self._log(req)
        digest = req.digest()
        responses = self._lookup(req, digest)
        n = req.decoding.n
        if req.decoding.temperature == 0 and n == 1:
            return ModelResponse([responses[0]])
        with self._lock:
            k = self._ordinals[digest]
            self._ordinals[digest] = k + 1
        return ModelResponse([responses[(k * n + i) % len(responses)] for i in range(n)])


class FunctionBackend(_CallLog):
    """Backend that answers with ``fn(request) -> list of choices``."""

    def __init__(self, fn: Callable[[ModelRequest], Sequence[str]]) -> None:
        super().__init__()
        self.fn = fn

    def complete(self, req: ModelRequest) -> ModelResponse:
        self._log(req)
        choices = list(self.fn(req))
        if len(choices) != req.decoding.n:
            raise ResponseShapeError(f"expected {req.decoding.n} choices, got {len(choices)}")
        return ModelResponse(choices)


class RecordingBackend:
    """Wraps a live backend and records ``digest -> responses`` for replay.

    Responses for repeated digests are appended in call order, so a
    :class:`MockBackend` built from :meth:`entries` replays sampling calls
    in the same order and greedy calls from the first response.
    """

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self._lock = threading.Lock()
        self._recorded: dict[str, list[str]] = {}

    def complete(self, req: ModelRequest) -> ModelResponse:
        resp = self.inner.complete(req)
        digest = req.digest()
        sampling = req.decoding.temperature != 0 or req.decoding.n != 1
        with self._lock:
            # greedy replays only ever read the first response
            if sampling or digest not in self._recorded:
                self._recorded.setdefault(digest, []).extend(resp.choices)
        return resp

    def entries(self) -> list[ScriptEntry]:
        with self._lock:
            return [ScriptEntry(list(v), digest=k) for k, v in sorted(self._recorded.items())]

    def dump(self, path: str | os.PathLike, merge: bool = True) -> None:
        """Write the script as JSONL sorted by digest."""
        entries = {e.digest: e for e in self.entries()}
        if merge and Path(path).exists():
            for e in load_script(path):
                if e.digest and e.digest not in entries:
                    entries[e.digest] = e
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for digest in sorted(entries):
                fh.write(json.dumps(entries[digest].to_json(), ensure_ascii=False) + "\n")
