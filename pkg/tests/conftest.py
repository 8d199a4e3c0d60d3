from __future__ import annotations

import httpx
import pytest

from graphmind.config import ExplorationConfig, RunConfig
from graphmind.kg_store import KnowledgeGraph, graph_from_triples, load_graph_file
from scripted import FIXTURES


@pytest.fixture
def medical_graph() -> KnowledgeGraph:
    return load_graph_file(FIXTURES / "medical_kg.csv")


@pytest.fixture
def small_graph() -> KnowledgeGraph:
    # A - B - C chain plus a disconnected D - E pair
    return graph_from_triples([("A", "r", "B"), ("B", "r", "C"), ("D", "r", "E")])


@pytest.fixture
def closed_gate_config() -> RunConfig:
    """Default run config whose relevance gate rejects every neighbor."""
    return RunConfig(exploration=ExplorationConfig(tau=1.5))


@pytest.fixture(autouse=True)
def _no_network(monkeypatch: pytest.MonkeyPatch) -> None:
    real_send = httpx.Client.send

    def guarded_send(self: httpx.Client, request: httpx.Request, **kwargs):
        if isinstance(self._transport, httpx.MockTransport):
            return real_send(self, request, **kwargs)
        raise AssertionError(f"unexpected network call to {request.url}")

    monkeypatch.setattr(httpx.Client, "send", guarded_send)


@pytest.fixture(autouse=True)
def _no_api_key(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("GRAPHMIND_API_KEY", raising=False)


@pytest.fixture
def api_key(monkeypatch: pytest.MonkeyPatch) -> str:
    monkeypatch.setenv("GRAPHMIND_API_KEY", "sk-very-secret")
    return "sk-very-secret"
