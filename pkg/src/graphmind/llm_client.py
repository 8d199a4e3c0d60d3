from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

from .config import API_KEY_ENV, LLM_MODE_LIVE, LLM_MODE_RECORD, ConfigError, LLMConfig

logger = logging.getLogger(__name__)

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
_VALID_ROLES = (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT)

_TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}
_BODY_EXCERPT_CHARS = 500


class LLMError(RuntimeError):
    pass


class LLMTransportError(LLMError):
    pass


class RateLimitError(LLMTransportError):
    pass


class MissingRecordingError(LLMError):
    def __init__(self, digest: str):
        super().__init__(f"no recorded response for request digest {digest}")
        self.digest = digest


class TranscriptError(ValueError):
    def __init__(self, path: Path, message: str, *, line: int | None = None):
        location = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{location}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _VALID_ROLES:
            raise ValueError(f"role must be one of {', '.join(_VALID_ROLES)}")
        if self.role != ROLE_ASSISTANT and not self.content.strip():
            raise ValueError(f"{self.role} message content must be nonempty")

    def as_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class CompletionParams:
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int | None = None

    def as_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }

    @staticmethod
    def from_config(config: LLMConfig) -> "CompletionParams":
        return CompletionParams(
            model_id=config.model_id,
            temperature=config.temperature,
            max_output_tokens=config.max_output_tokens,
        )


def system(content: str) -> ChatMessage:
    return ChatMessage(ROLE_SYSTEM, content)


def user(content: str) -> ChatMessage:
    return ChatMessage(ROLE_USER, content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage(ROLE_ASSISTANT, content)


def request_snapshot(messages: Sequence[ChatMessage], params: CompletionParams) -> dict[str, Any]:
    return {
        "messages": [message.as_dict() for message in messages],
        "params": params.as_dict(),
    }


def request_digest(messages: Sequence[ChatMessage], params: CompletionParams) -> str:
    canonical = json.dumps(
        request_snapshot(messages, params),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class LLMClient(Protocol):
    calls: int

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str: ...


class _CallCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0

    def _count(self) -> None:
        with self._lock:
            self.calls += 1

    def close(self) -> None:
        pass


def _check_messages(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be nonempty")


class HttpChatClient(_CallCounter):
    def __init__(
        self,
        config: LLMConfig,
        api_key: str | None,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__()
        self.config = config
        self._sleep = sleep
        self._in_flight = threading.BoundedSemaphore(config.max_in_flight)
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=config.timeout_seconds, headers=headers, transport=transport)
        self.total_tokens = 0

    def close(self) -> None:
        self._client.close()

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str:
        _check_messages(messages)
        body: dict[str, Any] = {
            "model": params.model_id,
            "messages": [message.as_dict() for message in messages],
            "temperature": params.temperature,
        }
        if params.max_output_tokens is not None:
            body["max_tokens"] = params.max_output_tokens
        self._count()
        with self._in_flight:
            response = self._post_with_retries(body)
        return self._parse_response(response)

    def _post_with_retries(self, body: dict[str, Any]) -> httpx.Response:
        attempts = self.config.max_retries + 1
        for attempt in range(1, attempts + 1):
            try:
                response = self._client.post(self.config.endpoint, json=body)
            except httpx.TransportError as exc:
                if attempt == attempts:
                    raise LLMTransportError(
                        f"LLM request failed after {attempts} attempt(s): {exc}"
                    ) from exc
                logger.warning("LLM transport error attempt=%s/%s: %s", attempt, attempts, exc)
                self._backoff(attempt)
                continue

            if response.status_code in {200, 201}:
                return response
            excerpt = response.text[:_BODY_EXCERPT_CHARS]
            if response.status_code in _TRANSIENT_STATUS and attempt < attempts:
                logger.warning(
                    "LLM endpoint returned status=%s attempt=%s/%s; retrying",
                    response.status_code,
                    attempt,
                    attempts,
                )
                self._backoff(attempt)
                continue
            if response.status_code == 429:
                raise RateLimitError(f"LLM endpoint rate-limited the request: {excerpt}")
            raise LLMTransportError(
                f"LLM request failed with status={response.status_code}: {excerpt}"
            )
        raise LLMTransportError("LLM request retries exhausted")

    def _backoff(self, attempt: int) -> None:
        delay = min(self.config.backoff_cap_seconds, self.config.backoff_base_seconds * 2 ** (attempt - 1))
        self._sleep(delay)

    def _parse_response(self, response: httpx.Response) -> str:
        try:
            payload = response.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMTransportError(
                f"LLM response is missing choices[0].message.content: {response.text[:_BODY_EXCERPT_CHARS]}"
            ) from exc
        usage = payload.get("usage") or {}
        if isinstance(usage.get("total_tokens"), int):
            self.total_tokens += usage["total_tokens"]
        return str(content or "")


@dataclass(frozen=True)
class TranscriptEntry:
    digest: str
    request: dict[str, Any]
    response: str

    def as_dict(self) -> dict[str, Any]:
        return {"digest": self.digest, "request": self.request, "response": self.response}


@dataclass
class Transcript:
    entries: dict[str, TranscriptEntry] = field(default_factory=dict)

    def lookup(self, digest: str) -> str | None:
        entry = self.entries.get(digest)
        return entry.response if entry else None

    @staticmethod
    def load(path: Path) -> "Transcript":
        try:
            with path.open("r", encoding="utf-8") as handle:
                return Transcript._parse(path, handle)
        except OSError as exc:
            raise TranscriptError(path, f"cannot read transcript ({exc.strerror or exc})") from exc

    @staticmethod
    def _parse(path: Path, handle: Iterable[str]) -> "Transcript":
        transcript = Transcript()
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                entry = TranscriptEntry(
                    digest=str(raw["digest"]),
                    request=dict(raw.get("request") or {}),
                    response=str(raw["response"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TranscriptError(path, f"corrupted transcript entry ({exc})", line=line_number) from exc
            transcript.entries[entry.digest] = entry
        return transcript


class ReplayClient(_CallCounter):
    def __init__(self, transcript: Transcript):
        super().__init__()
        self.transcript = transcript

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str:
        _check_messages(messages)
        self._count()
        digest = request_digest(messages, params)
        response = self.transcript.lookup(digest)
        if response is None:
            raise MissingRecordingError(digest)
        return response


class RecordingClient(_CallCounter):
    def __init__(self, inner: LLMClient, path: Path):
        super().__init__()
        self.inner = inner
        self.path = path
        self.transcript = Transcript.load(path) if path.exists() else Transcript()
        self._write_lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str:
        _check_messages(messages)
        self._count()
        digest = request_digest(messages, params)
        cached = self.transcript.lookup(digest)
        if cached is not None:
            return cached
        response = self.inner.complete(messages, params)
        entry = TranscriptEntry(digest=digest, request=request_snapshot(messages, params), response=response)
        with self._write_lock:
            if digest not in self.transcript.entries:
                self.transcript.entries[digest] = entry
                self._append(entry)
        return response

    def close(self) -> None:
        closer = getattr(self.inner, "close", None)
        if callable(closer):
            closer()

    def _append(self, entry: TranscriptEntry) -> None:
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(entry.as_dict(), sort_keys=True, ensure_ascii=False) + "\n")
        except OSError as exc:
            raise TranscriptError(self.path, f"cannot append to transcript ({exc.strerror or exc})") from exc


def replay(transcript_path: Path) -> ReplayClient:
    return ReplayClient(Transcript.load(transcript_path))


def record(transcript_path: Path, inner: LLMClient) -> RecordingClient:
    return RecordingClient(inner, transcript_path)


def build_client(config: LLMConfig, *, transport: httpx.BaseTransport | None = None) -> LLMClient:
    transcript = config.transcript
    if config.mode == LLM_MODE_LIVE:
        return HttpChatClient(config, _api_key(), transport=transport)
    if transcript is None:
        raise ConfigError(f"llm.transcript is required when llm.mode={config.mode}")
    if config.mode == LLM_MODE_RECORD:
        logger.info("Recording LLM responses to %s", transcript)
        return record(transcript, HttpChatClient(config, _api_key(), transport=transport))
    if not transcript.is_file():
        raise ConfigError(f"llm.transcript {transcript} does not exist")
    logger.info("Replaying LLM responses from %s", transcript)
    return replay(transcript)


def _api_key() -> str:
    api_key = os.environ.get(API_KEY_ENV)
    if not api_key:
        raise ConfigError(f"{API_KEY_ENV} is not set")
    return api_key
