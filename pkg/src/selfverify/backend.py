"""Model backends: HTTP, scripted mock, function-backed, record/replay.

All pipeline steps go through the Backend.complete interface, so any step
can run against a live OpenAI-compatible server, a deterministic script, or
a byte-exact replay of a previous run. Cache keys are content hashes of
every request field that affects the completion.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import requests

DEFAULT_TEMPERATURE = 0.1
DEFAULT_MAX_OUTPUT_TOKENS = 1024


class Mode(str, Enum):
    CHAT = "chat"
    COMPLETION = "completion"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class LlmRequest:
    """One completion request; immutable so it can hash and cross threads."""

    model_id: str
    mode: Mode
    prompt: str | None = None
    messages: tuple[Message, ...] = ()
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.mode is Mode.CHAT and not self.messages:
            raise ValueError("chat requests need at least one message")
        if self.mode is Mode.COMPLETION and self.prompt is None:
            raise ValueError("completion requests need a prompt")

    @classmethod
    def chat(cls, model_id: str, user_text: str, system: str | None = None, **kwargs) -> "LlmRequest":
        messages: list[Message] = []
        if system:
            messages.append(Message("system", system))
        messages.append(Message("user", user_text))
        return cls(model_id=model_id, mode=Mode.CHAT, messages=tuple(messages), **kwargs)

    @property
    def text(self) -> str:
        """All request text joined, used for script matching and debugging."""
        if self.mode is Mode.COMPLETION:
            return self.prompt or ""
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class LlmResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    usage: Usage | None = None
    latency_ms: float = 0.0
    from_cache: bool = False


def cache_key(request: LlmRequest) -> str:
    """Content hash of a request: sha256 hex over a canonical encoding.

    Every field is written as (tag, length, utf-8 bytes) in a fixed order,
    so no combination of values can collide by concatenation and adding a
    field later changes every key (by design).
    """
    h = hashlib.sha256()

    def put(tag: str, value: str) -> None:
        data = value.encode("utf-8")
        h.update(tag.encode("ascii"))
        h.update(b"\x00")
        h.update(struct.pack(">I", len(data)))
        h.update(data)

    put("model_id", request.model_id)
    put("mode", request.mode.value)
    put("prompt", request.prompt or "")
    for i, msg in enumerate(request.messages):
        put(f"message.{i}.role", msg.role)
        put(f"message.{i}.content", msg.content)
    put("temperature", repr(request.temperature))
    put("max_output_tokens", str(request.max_output_tokens))
    for i, s in enumerate(request.stop_sequences):
        put(f"stop.{i}", s)
    return h.hexdigest()


class BackendError(Exception):
    """Unrecoverable backend failure after retries."""


class RateLimited(BackendError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class ScriptExhausted(BackendError):
    """A mock script had no step matching the request."""


class ReplayMiss(BackendError):
    """Replay was asked for a request that was never recorded."""


class StoreCorrupt(BackendError):
    """The response store file failed structural validation."""


class Backend(ABC):
    @abstractmethod
    def complete(self, request: LlmRequest) -> LlmResponse:
        raise NotImplementedError


@dataclass
class ScriptStep:
    """One mock rule: when `matcher` accepts the request, answer `response`.

    `matcher` is a substring of the request text, a list of substrings that
    must all be present, or a predicate on the request. `once` steps are
    consumed by their first use, which lets scripts express "answer A the
    first time, B afterwards".
    """

    matcher: str | list[str] | Callable[[LlmRequest], bool]
    response: str | LlmResponse | Callable[[LlmRequest], str]
    once: bool = False

    def matches(self, request: LlmRequest) -> bool:
        if callable(self.matcher):
            return bool(self.matcher(request))
        if isinstance(self.matcher, str):
            return self.matcher in request.text
        return all(s in request.text for s in self.matcher)

    def render(self, request: LlmRequest) -> LlmResponse:
        r = self.response
        if callable(r):
            r = r(request)
        if isinstance(r, LlmResponse):
            return r
        return LlmResponse(text=r, finish_reason=FinishReason.STOP, latency_ms=0.0)


class MockBackend(Backend):
    """Deterministic scripted backend; first matching step wins.

    With no matching step, returns `default` when set, otherwise raises
    ScriptExhausted. Thread-safe; `once` consumption is atomic.
    """

    def __init__(self, steps: list[ScriptStep] | None = None, default: str | None = None):
        self.steps = list(steps or [])
        self.default = default
        self.calls: list[LlmRequest] = []
        self._consumed: set[int] = set()
        self._lock = threading.Lock()

    def complete(self, request: LlmRequest) -> LlmResponse:
        with self._lock:
            self.calls.append(request)
            for i, step in enumerate(self.steps):
                if i in self._consumed:
                    continue
                if step.matches(request):
                    if step.once:
                        self._consumed.add(i)
                    return step.render(request)
            if self.default is not None:
                return LlmResponse(text=self.default, finish_reason=FinishReason.STOP)
        raise ScriptExhausted(
            f"no script step matched request starting {request.text[:120]!r}"
        )


def load_script(path: str | Path) -> list[ScriptStep]:
    """Read mock script steps from a JSONL file.

    Each line is an object with "response" (required) and "match" (a
    substring or list of substrings; omit to match anything) plus optional
    "once". Blank lines and lines starting with # are skipped.
    """
    steps: list[ScriptStep] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: bad JSON: {exc}") from None
        if not isinstance(obj, dict) or "response" not in obj:
            raise ValueError(f"{path}:{lineno}: each step needs a 'response' field")
        match = obj.get("match", "")
        if not isinstance(match, (str, list)):
            raise ValueError(f"{path}:{lineno}: 'match' must be a string or list")
        steps.append(
            ScriptStep(matcher=match, response=str(obj["response"]), once=bool(obj.get("once", False)))
        )
    return steps


class FnBackend(Backend):
    """Backend driven by a plain function, for tests that need live state."""

    def __init__(self, fn: Callable[[LlmRequest], str | LlmResponse]):
        self.fn = fn

    def complete(self, request: LlmRequest) -> LlmResponse:
        out = self.fn(request)
        if isinstance(out, LlmResponse):
            return out
        return LlmResponse(text=out, finish_reason=FinishReason.STOP)


@dataclass
class HttpConfig:
    """Connection settings for an OpenAI-compatible HTTP server."""

    base_url: str
    api_key_env: str = "LLM_API_KEY"
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    timeout_s: float = 60.0
    max_attempts: int = 5
    backoff_base_s: float = 0.5
    backoff_cap_s: float = 30.0
    extra_headers: dict[str, str] = field(default_factory=dict)


_RETRYABLE_STATUS = {500, 502, 503, 504}


class HttpBackend(Backend):
    """Talks to /v1/chat/completions or /v1/completions with retry/backoff.

    Transient failures (connection errors, 5xx) retry with exponential
    backoff up to max_attempts. 429 responses honor Retry-After through a
    cooldown shared by all threads using this backend instance.
    """

    def __init__(
        self,
        config: HttpConfig,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.session = session or requests.Session()
        self._sleep = sleep
        self._clock = clock
        self._cooldown_until = 0.0
        self._cooldown_lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        headers.update(self.config.extra_headers)
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            scheme = self.config.auth_scheme
            headers[self.config.auth_header] = f"{scheme} {key}".strip() if scheme else key
        return headers

    def _endpoint_and_payload(self, request: LlmRequest) -> tuple[str, dict]:
        base = self.config.base_url.rstrip("/")
        payload: dict = {
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        if request.mode is Mode.CHAT:
            payload["messages"] = [{"role": m.role, "content": m.content} for m in request.messages]
            return f"{base}/v1/chat/completions", payload
        payload["prompt"] = request.prompt
        return f"{base}/v1/completions", payload

    def _wait_for_cooldown(self) -> None:
        while True:
            with self._cooldown_lock:
                remaining = self._cooldown_until - self._clock()
            if remaining <= 0:
                return
            self._sleep(min(remaining, 1.0))

    def _enter_cooldown(self, seconds: float) -> None:
        with self._cooldown_lock:
            self._cooldown_until = max(self._cooldown_until, self._clock() + seconds)

    @staticmethod
    def _parse_response(data: dict, request: LlmRequest) -> LlmResponse:
        try:
            choice = data["choices"][0]
            if request.mode is Mode.CHAT:
                text = choice["message"]["content"]
            else:
                text = choice["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from None
        raw_reason = str(choice.get("finish_reason", "stop")).lower()
        if raw_reason in ("stop", "end_turn", "stop_sequence"):
            reason = FinishReason.STOP
        elif raw_reason in ("length", "max_tokens"):
            reason = FinishReason.LENGTH
        else:
            reason = FinishReason.ERROR
        usage = None
        if isinstance(data.get("usage"), dict):
            u = data["usage"]
            usage = Usage(
                prompt_tokens=int(u.get("prompt_tokens", 0)),
                completion_tokens=int(u.get("completion_tokens", 0)),
            )
        return LlmResponse(text=text or "", finish_reason=reason, usage=usage)

    def complete(self, request: LlmRequest) -> LlmResponse:
        url, payload = self._endpoint_and_payload(request)
        last_error: Exception | None = None
        for attempt in range(self.config.max_attempts):
            self._wait_for_cooldown()
            if attempt:
                delay = min(self.config.backoff_base_s * 2 ** (attempt - 1), self.config.backoff_cap_s)
                self._sleep(delay)
            started = self._clock()
            try:
                resp = self.session.post(
                    url, json=payload, headers=self._headers(), timeout=self.config.timeout_s
                )
            except requests.RequestException as exc:
                last_error = BackendError(f"request failed: {exc}")
                continue
            elapsed_ms = (self._clock() - started) * 1000.0
            if resp.status_code == 429:
                retry_after = _parse_retry_after(resp.headers.get("Retry-After"))
                cooldown = retry_after if retry_after is not None else min(
                    self.config.backoff_base_s * 2**attempt, self.config.backoff_cap_s
                )
                self._enter_cooldown(cooldown)
                last_error = RateLimited("rate limited (429)", retry_after=retry_after)
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = BackendError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
            except ValueError as exc:
                raise BackendError(f"invalid JSON from server: {exc}") from None
            parsed = self._parse_response(data, request)
            return LlmResponse(
                text=parsed.text,
                finish_reason=parsed.finish_reason,
                usage=parsed.usage,
                latency_ms=elapsed_ms,
            )
        raise last_error if last_error else BackendError("no attempts made")


def _parse_retry_after(value: str | None) -> float | None:
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


_STORE_HEADER_LEN = 32 + 8 + 4  # digest + timestamp + text length


class ResponseStore:
    """Append-only binary store of (cache key -> response text).

    Record layout, repeated to end of file:
      32 bytes  sha256 digest of the request (the cache key, raw bytes)
       8 bytes  big-endian unsigned seconds since the epoch
       4 bytes  big-endian unsigned UTF-8 byte length of the text
       N bytes  the response text, UTF-8

    The file is scanned once on open to build the in-memory index; a
    truncated or structurally invalid tail raises StoreCorrupt. Writes are
    at-most-once per key and thread-safe.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.RLock()
        self._index: dict[str, int] = {}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.touch()
        self._load_index()

    def _load_index(self) -> None:
        data = self.path.read_bytes()
        offset = 0
        index: dict[str, int] = {}
        while offset < len(data):
            if offset + _STORE_HEADER_LEN > len(data):
                raise StoreCorrupt(f"{self.path}: truncated record header at byte {offset}")
            digest = data[offset : offset + 32]
            (text_len,) = struct.unpack(">I", data[offset + 40 : offset + 44])
            end = offset + _STORE_HEADER_LEN + text_len
            if end > len(data):
                raise StoreCorrupt(f"{self.path}: truncated record body at byte {offset}")
            try:
                data[offset + _STORE_HEADER_LEN : end].decode("utf-8")
            except UnicodeDecodeError:
                raise StoreCorrupt(f"{self.path}: undecodable text at byte {offset}") from None
            index.setdefault(digest.hex(), offset)
            offset = end
        self._index = index

    @staticmethod
    def _check_key(key: str) -> bytes:
        try:
            digest = bytes.fromhex(key)
        except ValueError:
            raise ValueError(f"cache key must be hex, got {key!r}") from None
        if len(digest) != 32:
            raise ValueError(f"cache key must be 32 bytes of hex, got {len(digest)}")
        return digest

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._index

    def __len__(self) -> int:
        with self._lock:
            return len(self._index)

    def keys(self) -> list[str]:
        with self._lock:
            return list(self._index)

    def get(self, key: str) -> str | None:
        self._check_key(key)
        with self._lock:
            offset = self._index.get(key)
            if offset is None:
                return None
            with self.path.open("rb") as fh:
                fh.seek(offset + 40)
                (text_len,) = struct.unpack(">I", fh.read(4))
                return fh.read(text_len).decode("utf-8")

    def put(self, key: str, text: str, timestamp: int | None = None) -> bool:
        """Store text under key; returns False if the key already exists."""
        digest = self._check_key(key)
        payload = text.encode("utf-8")
        ts = int(time.time()) if timestamp is None else int(timestamp)
        with self._lock:
            if key in self._index:
                return False
            with self.path.open("ab") as fh:
                offset = fh.tell()
                fh.write(digest)
                fh.write(struct.pack(">Q", ts))
                fh.write(struct.pack(">I", len(payload)))
                fh.write(payload)
                fh.flush()
            self._index[key] = offset
            return True

    def purge(self) -> int:
        """Delete every record; returns how many were removed."""
        with self._lock:
            removed = len(self._index)
            self.path.write_bytes(b"")
            self._index = {}
            return removed

    def merge_from(self, other_path: str | Path) -> int:
        """Copy records absent here from another store file; returns count added."""
        other = ResponseStore(other_path)
        added = 0
        for key in other.keys():
            text = other.get(key)
            if text is not None and self.put(key, text):
                added += 1
        return added

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"entries": len(self._index), "bytes": self.path.stat().st_size}


class CachingBackend(Backend):
    """Serves from the store when possible, else calls inner and records.

    Each key is written at most once; cache hits report from_cache=True and
    zero latency so replayed timings never leak into fresh runs.
    """

    def __init__(self, inner: Backend, store: ResponseStore):
        self.inner = inner
        self.store = store

    def complete(self, request: LlmRequest) -> LlmResponse:
        key = cache_key(request)
        cached = self.store.get(key)
        if cached is not None:
            return LlmResponse(text=cached, finish_reason=FinishReason.STOP, latency_ms=0.0, from_cache=True)
        response = self.inner.complete(request)
        self.store.put(key, response.text)
        return response


class RecordBackend(CachingBackend):
    """CachingBackend under its capture-for-replay name."""


class ReplayBackend(Backend):
    """Answers only from a store; unknown requests raise ReplayMiss."""

    def __init__(self, store: ResponseStore):
        self.store = store

    def complete(self, request: LlmRequest) -> LlmResponse:
        key = cache_key(request)
        text = self.store.get(key)
        if text is None:
            raise ReplayMiss(
                f"no recorded response for key {key[:12]}... "
                f"(request starts {request.text[:80]!r})"
            )
        return LlmResponse(text=text, finish_reason=FinishReason.STOP, latency_ms=0.0, from_cache=True)
