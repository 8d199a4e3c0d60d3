from __future__ import annotations

import json
import logging
from pathlib import Path

import httpx
import pytest

from graphmind.config import ConfigError, LLMConfig
from graphmind.llm_client import (
    ChatMessage,
    CompletionParams,
    HttpChatClient,
    LLMTransportError,
    MissingRecordingError,
    RateLimitError,
    RecordingClient,
    ReplayClient,
    Transcript,
    TranscriptError,
    build_client,
    record,
    replay,
    request_digest,
    system,
    user,
)
from scripted import ScriptedLLM

PARAMS = CompletionParams(model_id="test-model", temperature=0.0, max_output_tokens=64)
MESSAGES = [system("You are terse."), user("Say hi.")]


def _ok(content: str = "hi") -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}], "usage": {"total_tokens": 5}})


def _client(handler, *, sleeps: list[float] | None = None, **overrides) -> HttpChatClient:
    config = LLMConfig(endpoint="https://llm.example/v1/chat/completions", **overrides)
    sink = sleeps if sleeps is not None else []
    return HttpChatClient(config, "sk-test", transport=httpx.MockTransport(handler), sleep=sink.append)


def test_http_client_posts_chat_request() -> None:
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return _ok()

    client = _client(handler)
    assert client.complete(MESSAGES, PARAMS) == "hi"

    body = json.loads(seen[0].content)
    assert body == {
        "model": "test-model",
        "messages": [{"role": "system", "content": "You are terse."}, {"role": "user", "content": "Say hi."}],
        "temperature": 0.0,
        "max_tokens": 64,
    }
    assert seen[0].headers["Authorization"] == "Bearer sk-test"
    assert client.calls == 1
    assert client.total_tokens == 5


def test_http_client_retries_transient_status_with_backoff() -> None:
    statuses = iter([503, 429, 200])
    sleeps: list[float] = []

    def handler(request: httpx.Request) -> httpx.Response:
        status = next(statuses)
        return _ok("done") if status == 200 else httpx.Response(status, text="busy")

    client = _client(handler, sleeps=sleeps)

    assert client.complete(MESSAGES, PARAMS) == "done"
    assert sleeps == [0.5, 1.0]


def test_backoff_is_capped() -> None:
    sleeps: list[float] = []
    client = _client(lambda request: httpx.Response(500), sleeps=sleeps, max_retries=5, backoff_cap_seconds=2.0)

    with pytest.raises(LLMTransportError, match="status=500"):
        client.complete(MESSAGES, PARAMS)
    assert sleeps == [0.5, 1.0, 2.0, 2.0, 2.0]


def test_rate_limit_surfaces_after_retries() -> None:
    client = _client(lambda request: httpx.Response(429, text="slow down"), max_retries=0)

    with pytest.raises(RateLimitError, match="slow down"):
        client.complete(MESSAGES, PARAMS)


def test_client_errors_are_not_retried() -> None:
    sleeps: list[float] = []
    client = _client(lambda request: httpx.Response(400, text="bad model"), sleeps=sleeps)

    with pytest.raises(LLMTransportError, match="status=400"):
        client.complete(MESSAGES, PARAMS)
    assert sleeps == []


def test_transport_errors_are_retried_then_raised() -> None:
    def handler(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("refused", request=request)

    sleeps: list[float] = []
    client = _client(handler, sleeps=sleeps, max_retries=2)

    with pytest.raises(LLMTransportError, match="after 3 attempt"):
        client.complete(MESSAGES, PARAMS)
    assert len(sleeps) == 2


def test_malformed_response_body() -> None:
    client = _client(lambda request: httpx.Response(200, json={"choices": []}))

    with pytest.raises(LLMTransportError, match="choices"):
        client.complete(MESSAGES, PARAMS)


def test_request_digest_covers_messages_and_params() -> None:
    digest = request_digest(MESSAGES, PARAMS)

    assert digest == request_digest(list(MESSAGES), CompletionParams("test-model", 0.0, 64))
    assert digest != request_digest(MESSAGES, CompletionParams("test-model", 0.7, 64))
    assert digest != request_digest([system("You are terse."), user("Say hello.")], PARAMS)


def test_record_then_replay(tmp_path: Path) -> None:
    transcript = tmp_path / "llm" / "transcript.jsonl"
    inner = ScriptedLLM([("Say hi.", "hi")])

    recorder = record(transcript, inner)
    assert isinstance(recorder, RecordingClient)
    assert recorder.complete(MESSAGES, PARAMS) == "hi"
    assert recorder.complete(MESSAGES, PARAMS) == "hi"
    assert inner.calls == 1
    assert len(transcript.read_text(encoding="utf-8").splitlines()) == 1

    replayer = replay(transcript)
    assert replayer.complete(MESSAGES, PARAMS) == "hi"
    with pytest.raises(MissingRecordingError) as excinfo:
        replayer.complete([user("Something new")], PARAMS)
    assert excinfo.value.digest == request_digest([user("Something new")], PARAMS)


def test_corrupted_transcript_names_the_line(tmp_path: Path) -> None:
    path = tmp_path / "transcript.jsonl"
    path.write_text('{"digest": "a", "request": {}, "response": "x"}\n{"digest": "b"\n', encoding="utf-8")

    with pytest.raises(TranscriptError) as excinfo:
        Transcript.load(path)

    assert excinfo.value.line == 2


def test_build_client_live_needs_api_key() -> None:
    with pytest.raises(ConfigError, match="GRAPHMIND_API_KEY"):
        build_client(LLMConfig())
    with pytest.raises(ConfigError, match="GRAPHMIND_API_KEY"):
        build_client(LLMConfig(), transport=httpx.MockTransport(lambda request: _ok()))


def test_build_client_replay_needs_existing_transcript(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="does not exist"):
        build_client(LLMConfig(mode="replay", transcript=tmp_path / "missing.jsonl"))

    (tmp_path / "present.jsonl").write_text("", encoding="utf-8")
    assert isinstance(build_client(LLMConfig(mode="replay", transcript=tmp_path / "present.jsonl")), ReplayClient)


def test_api_key_is_never_logged(api_key: str, caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.DEBUG)
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(503) if len(seen) == 1 else _ok()

    client = build_client(LLMConfig(backoff_base_seconds=0.0), transport=httpx.MockTransport(handler))
    client.complete(MESSAGES, PARAMS)

    assert seen[0].headers["Authorization"] == f"Bearer {api_key}"
    assert api_key not in caplog.text


def test_chat_message_validation() -> None:
    with pytest.raises(ValueError, match="role"):
        ChatMessage("tool", "x")
    with pytest.raises(ValueError, match="nonempty"):
        user("   ")
    assert ChatMessage("assistant", "").content == ""


def test_build_client_record_mode_writes_transcript(api_key: str, tmp_path: Path) -> None:
    transcript = tmp_path / "transcript.jsonl"
    config = LLMConfig(mode="record", transcript=transcript)

    client = build_client(config, transport=httpx.MockTransport(lambda request: _ok("recorded")))

    assert isinstance(client, RecordingClient)
    assert client.complete(MESSAGES, PARAMS) == "recorded"
    assert replay(transcript).complete(MESSAGES, PARAMS) == "recorded"


def test_line_separator_in_response_survives_replay(tmp_path: Path) -> None:
    transcript = tmp_path / "transcript.jsonl"
    answer = "Output1: line one\u2028line two\u2029line three\x85end"
    inner = ScriptedLLM([("Say hi.", answer), ("Say bye.", "bye")])
    recorder = record(transcript, inner)
    recorder.complete(MESSAGES, PARAMS)
    recorder.complete([user("Say bye.")], PARAMS)

    assert "\u2028" in transcript.read_text(encoding="utf-8")
    loaded = Transcript.load(transcript)
    assert len(loaded.entries) == 2
    assert replay(transcript).complete(MESSAGES, PARAMS) == answer
    assert replay(transcript).complete([user("Say bye.")], PARAMS) == "bye"
