from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Any, Iterable, Protocol, Sequence

from .config import GATE_LLM, ExplorationConfig
from .embedding import Embedder, Embedding, HashedTrigramEmbedder, cosine
from .kg_store import DIRECTION_BOTH, EntityId, HopPath, KnowledgeGraph, Triple, bfs_within_k
from .llm_client import CompletionParams, LLMClient, system, user
from .templates import PromptProfile

logger = logging.getLogger(__name__)

__all__ = [
    "KIND_NEIGHBOR",
    "KIND_PATH",
    "EmbeddingRelevanceGate",
    "EvidenceGraphs",
    "EvidenceSubgraph",
    "ExplorationConfig",
    "LLMRelevanceGate",
    "RelevanceGate",
    "evidence_graphs_to_dict",
    "explore",
    "explore_neighbor_based",
    "explore_path_based",
    "merge",
    "prune",
]

KIND_PATH = "path-based"
KIND_NEIGHBOR = "neighbor-based"
_KINDS = (KIND_PATH, KIND_NEIGHBOR)


@dataclass(frozen=True)
class EvidenceSubgraph:
    kind: str
    head: EntityId
    triples: tuple[Triple, ...]

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {', '.join(_KINDS)}")
        if not self.triples:
            raise ValueError("evidence subgraph must contain at least one triple")
        if self.head not in self.nodes:
            raise ValueError(f"head {self.head} is not a node of the subgraph")

    @property
    def nodes(self) -> tuple[EntityId, ...]:
        ordered: dict[EntityId, None] = {}
        for triple in self.triples:
            ordered.setdefault(triple.head)
            ordered.setdefault(triple.tail)
        return tuple(ordered)


@dataclass(frozen=True)
class EvidenceGraphs:
    path_subgraphs: tuple[EvidenceSubgraph, ...] = ()
    neighbor_subgraphs: tuple[EvidenceSubgraph, ...] = ()
    augmented_entities: tuple[EntityId, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not self.path_subgraphs and not self.neighbor_subgraphs

    def subgraphs(self, kind: str) -> tuple[EvidenceSubgraph, ...]:
        return self.path_subgraphs if kind == KIND_PATH else self.neighbor_subgraphs


class RelevanceGate(Protocol):
    def __call__(self, graph: KnowledgeGraph, entity: EntityId) -> bool: ...


class EmbeddingRelevanceGate:
    def __init__(self, question_embedding: Embedding, embedder: Embedder, tau: float):
        self.question_embedding = question_embedding
        self.embedder = embedder
        self.tau = tau

    def __call__(self, graph: KnowledgeGraph, entity: EntityId) -> bool:
        score = cosine(self.embedder.embed(graph.entity_label(entity)), self.question_embedding)
        return score >= self.tau


class LLMRelevanceGate:
    def __init__(self, llm: LLMClient, question: str, profile: PromptProfile, params: CompletionParams):
        self.llm = llm
        self.question = question
        self.profile = profile
        self.params = params

    def __call__(self, graph: KnowledgeGraph, entity: EntityId) -> bool:
        prompt = self.profile.relevance_gate.format(question=self.question, entity=graph.entity_label(entity))
        reply = self.llm.complete([system(self.profile.system_instruction), user(prompt)], self.params)
        words = reply.strip().split()
        return bool(words) and words[0].strip(".,!\"'").casefold() == "yes"


def _unique(entities: Iterable[EntityId]) -> list[EntityId]:
    return list(dict.fromkeys(entities))


def _unique_triples(triples: Iterable[Triple]) -> tuple[Triple, ...]:
    return tuple(dict.fromkeys(triples))


def explore_path_based(
    graph: KnowledgeGraph,
    vq: Sequence[EntityId],
    cfg: ExplorationConfig,
) -> tuple[list[EvidenceSubgraph], tuple[EntityId, ...]]:
    # An unreachable candidate closes the chain; the next one in input order starts a new chain.
    entities = _unique(vq)
    for entity in entities:
        graph.check_entity(entity)
    augmented = list(entities)
    if len(entities) < 2:
        return [], tuple(augmented)

    subgraphs: list[EvidenceSubgraph] = []
    candidates = entities[1:]
    start = entities[0]
    chain_head = start
    chain: list[HopPath] = []

    def close_chain() -> None:
        if chain:
            triples = _unique_triples(triple for segment in chain for triple in segment.triples)
            subgraphs.append(EvidenceSubgraph(kind=KIND_PATH, head=chain_head, triples=triples))

    while candidates:
        segment = bfs_within_k(graph, start, candidates, cfg.k)
        if segment is None:
            logger.debug("No candidate within k=%s of %r", cfg.k, graph.entity_label(start))
            close_chain()
            chain = []
            start = candidates.pop(0)
            chain_head = start
            continue
        chain.append(segment)
        for node in segment.nodes[1:-1]:
            if node not in augmented:
                augmented.append(node)
        start = segment.endpoints[1]
        candidates.remove(start)
    close_chain()

    logger.info("Path-based exploration subgraphs=%s bridging=%s", len(subgraphs), len(augmented) - len(entities))
    return subgraphs, tuple(augmented)


def explore_neighbor_based(
    graph: KnowledgeGraph,
    vq: Sequence[EntityId],
    question_embedding: Embedding,
    embedder: Embedder,
    cfg: ExplorationConfig,
    *,
    gate: RelevanceGate | None = None,
) -> list[EvidenceSubgraph]:
    gate = gate or EmbeddingRelevanceGate(question_embedding, embedder, cfg.tau)
    decisions: dict[EntityId, bool] = {}
    subgraphs: list[EvidenceSubgraph] = []
    for seed in _unique(vq):
        first_hop = graph.neighbors(seed, DIRECTION_BOTH)
        collected = list(first_hop)
        for neighbor in _unique(triple.other_end(seed) for triple in first_hop):
            if neighbor == seed:
                continue
            if neighbor not in decisions:
                decisions[neighbor] = gate(graph, neighbor)
            if decisions[neighbor]:
                collected.extend(graph.neighbors(neighbor, DIRECTION_BOTH))
        triples = _unique_triples(collected)
        if triples:
            subgraphs.append(EvidenceSubgraph(kind=KIND_NEIGHBOR, head=seed, triples=triples))
    expanded = sum(1 for accepted in decisions.values() if accepted)
    logger.info(
        "Neighbor-based exploration subgraphs=%s expanded_neighbors=%s/%s",
        len(subgraphs),
        expanded,
        len(decisions),
    )
    return subgraphs


def prune(subgraphs: Sequence[EvidenceSubgraph], cfg: ExplorationConfig) -> list[EvidenceSubgraph]:
    rng = random.Random(cfg.seed)
    groups: dict[EntityId, list[int]] = {}
    for position, subgraph in enumerate(subgraphs):
        groups.setdefault(subgraph.head, []).append(position)

    keep: set[int] = set()
    for positions in groups.values():
        if len(positions) <= cfg.n_max:
            keep.update(positions)
            continue
        chosen = sorted(rng.sample(range(len(positions)), cfg.n_max))
        keep.update(positions[index] for index in chosen)
    return [subgraph for position, subgraph in enumerate(subgraphs) if position in keep]


def merge(
    path_subgraphs: Sequence[EvidenceSubgraph],
    neighbor_subgraphs: Sequence[EvidenceSubgraph],
    augmented_entities: Iterable[EntityId],
) -> EvidenceGraphs:
    return EvidenceGraphs(
        path_subgraphs=tuple(path_subgraphs),
        neighbor_subgraphs=tuple(neighbor_subgraphs),
        augmented_entities=tuple(_unique(augmented_entities)),
    )


def explore(
    graph: KnowledgeGraph,
    vq: Sequence[EntityId],
    question: str,
    cfg: ExplorationConfig,
    *,
    embedder: Embedder | None = None,
    llm: LLMClient | None = None,
    profile: PromptProfile | None = None,
    params: CompletionParams | None = None,
) -> EvidenceGraphs:
    embedder = embedder or HashedTrigramEmbedder()
    gate: RelevanceGate | None = None
    if cfg.relevance_gate == GATE_LLM:
        if llm is None or profile is None or params is None:
            raise ValueError("the llm relevance gate needs an llm client, a prompt profile and params")
        gate = LLMRelevanceGate(llm, question, profile, params)

    path_subgraphs, augmented = explore_path_based(graph, vq, cfg)
    neighbor_subgraphs = explore_neighbor_based(
        graph, vq, embedder.embed(question), embedder, cfg, gate=gate
    )
    return merge(prune(path_subgraphs, cfg), prune(neighbor_subgraphs, cfg), augmented)


def _subgraph_to_dict(subgraph: EvidenceSubgraph, graph: KnowledgeGraph) -> dict[str, Any]:
    return {
        "head": graph.entity_label(subgraph.head),
        "kind": subgraph.kind,
        "triples": [list(graph.triple_labels(triple)) for triple in subgraph.triples],
    }


def evidence_graphs_to_dict(evidence: EvidenceGraphs, graph: KnowledgeGraph) -> dict[str, Any]:
    return {
        "augmented_entities": [graph.entity_label(entity) for entity in evidence.augmented_entities],
        "neighbor_based": [_subgraph_to_dict(item, graph) for item in evidence.neighbor_subgraphs],
        "path_based": [_subgraph_to_dict(item, graph) for item in evidence.path_subgraphs],
    }
