from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .explorer import KIND_NEIGHBOR, KIND_PATH, EvidenceGraphs, EvidenceSubgraph
from .kg_store import KnowledgeGraph, Triple
from .llm_client import CompletionParams, LLMClient, system, user
from .templates import PromptProfile, load_profile

logger = logging.getLogger(__name__)

_KIND_TITLES = {KIND_PATH: "Path-based", KIND_NEIGHBOR: "Neighbor-based"}


class AggregationError(RuntimeError):
    pass


def evidence_title(kind: str, number: int) -> str:
    return f"{_KIND_TITLES[kind]} Evidence {number}"


@dataclass(frozen=True)
class RouteSegment:
    sources: tuple[str, ...]
    relation: str
    targets: tuple[str, ...]


@dataclass(frozen=True)
class EvidenceRoute:
    text: str
    structured: tuple[RouteSegment, ...]
    origin: tuple[str, int]

    @property
    def kind(self) -> str:
        return self.origin[0]

    @property
    def number(self) -> int:
        return self.origin[1] + 1

    @property
    def title(self) -> str:
        return evidence_title(self.kind, self.number)

    def node_labels(self) -> tuple[str, ...]:
        labels: dict[str, None] = {}
        for segment in self.structured:
            for label in (*segment.sources, *segment.targets):
                labels.setdefault(label)
        return tuple(labels)

    def relation_labels(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(segment.relation for segment in self.structured))


@dataclass(frozen=True)
class ReasoningGraph:
    path_routes: tuple[EvidenceRoute, ...] = ()
    neighbor_routes: tuple[EvidenceRoute, ...] = ()
    path_text: str = ""
    neighbor_text: str = ""

    @property
    def is_empty(self) -> bool:
        return not self.path_routes and not self.neighbor_routes

    def routes(self, kind: str) -> tuple[EvidenceRoute, ...]:
        return self.path_routes if kind == KIND_PATH else self.neighbor_routes

    def route(self, kind: str, number: int) -> EvidenceRoute | None:
        routes = self.routes(kind)
        return routes[number - 1] if 1 <= number <= len(routes) else None


def _group_segments(graph: KnowledgeGraph, triples: Sequence[Triple]) -> list[RouteSegment]:
    segments: list[RouteSegment] = []
    for triple in triples:
        head, relation, tail = graph.triple_labels(triple)
        if segments:
            last = segments[-1]
            if last.relation == relation and last.targets == (tail,) and head not in last.sources:
                segments[-1] = RouteSegment((*last.sources, head), relation, last.targets)
                continue
            if last.relation == relation and last.sources == (head,) and tail not in last.targets:
                segments[-1] = RouteSegment(last.sources, relation, (*last.targets, tail))
                continue
        segments.append(RouteSegment((head,), relation, (tail,)))
    return segments


def _group_text(labels: tuple[str, ...]) -> str:
    return labels[0] if len(labels) == 1 else f"({', '.join(labels)})"


def _render(segments: Sequence[RouteSegment]) -> str:
    pieces: list[str] = []
    previous: RouteSegment | None = None
    for segment in segments:
        tail_text = f" - {segment.relation} - {_group_text(segment.targets)}"
        if previous is not None and len(previous.targets) == 1 and previous.targets == segment.sources:
            pieces[-1] += tail_text
        else:
            pieces.append(_group_text(segment.sources) + tail_text)
        previous = segment
    return "; ".join(pieces)


def serialize_triples(graph: KnowledgeGraph, triples: Sequence[Triple]) -> tuple[str, tuple[RouteSegment, ...]]:
    segments = _group_segments(graph, triples)
    return _render(segments), tuple(segments)


def serialize_subgraph(subgraph: EvidenceSubgraph, graph: KnowledgeGraph, index: int = 0) -> EvidenceRoute:
    """Render a subgraph as ``entity - relation - entity`` text.

    ``(Fatigue, IsSymptomOf, LiverProblem), (Nausea, IsSymptomOf, LiverProblem)``
    becomes ``(Fatigue, Nausea) - IsSymptomOf - LiverProblem``.
    """
    text, segments = serialize_triples(graph, subgraph.triples)
    return EvidenceRoute(text=text, structured=segments, origin=(subgraph.kind, index))


def build_aggregation_prompt(
    routes: Sequence[EvidenceRoute],
    kind: str,
    profile: PromptProfile | None = None,
) -> str:
    if not routes:
        raise ValueError("aggregation prompt needs at least one route")
    profile = profile or load_profile()
    lines = [f"{evidence_title(kind, number)}: {route.text}" for number, route in enumerate(routes, start=1)]
    return profile.aggregate.format(kind=_KIND_TITLES[kind].lower(), evidence="\n".join(lines))


def aggregate(
    llm: LLMClient,
    evidence: EvidenceGraphs,
    graph: KnowledgeGraph,
    *,
    profile: PromptProfile | None = None,
    params: CompletionParams,
) -> ReasoningGraph:
    profile = profile or load_profile()
    routes: dict[str, tuple[EvidenceRoute, ...]] = {}
    texts: dict[str, str] = {}
    for kind in (KIND_PATH, KIND_NEIGHBOR):
        kind_routes = tuple(
            serialize_subgraph(subgraph, graph, index) for index, subgraph in enumerate(evidence.subgraphs(kind))
        )
        routes[kind] = kind_routes
        texts[kind] = ""
        if not kind_routes:
            continue
        prompt = build_aggregation_prompt(kind_routes, kind, profile)
        reply = llm.complete([system(profile.system_instruction), user(prompt)], params)
        if not reply.strip():
            raise AggregationError(f"empty consolidation reply for {kind} evidence")
        texts[kind] = reply.strip()
        logger.info("Aggregated %s evidence routes=%s", kind, len(kind_routes))
    return ReasoningGraph(
        path_routes=routes[KIND_PATH],
        neighbor_routes=routes[KIND_NEIGHBOR],
        path_text=texts[KIND_PATH],
        neighbor_text=texts[KIND_NEIGHBOR],
    )
