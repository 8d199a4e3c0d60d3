from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedding import Embedder, Embedding, HashedTrigramEmbedder, cosine
from .kg_store import EntityId, GraphContractError, KnowledgeGraph
from .llm_client import CompletionParams, LLMClient, system, user
from .templates import Exemplar, PromptProfile, load_profile

logger = logging.getLogger(__name__)

__all__ = [
    "EntityIndex",
    "EntityMention",
    "Exemplar",
    "ExtractionError",
    "LinkedEntity",
    "build_extraction_prompt",
    "extract_entities",
    "link",
    "parse_entity_list",
]

_TIE_EPSILON = 1e-9
_MAX_MENTION_CHARS = 120
_NONE_REPLIES = {"none", "n/a", "na", "[]", "no entities", "nothing"}
_LABEL_PREFIX = re.compile(r"^\s*(?:key\s+)?entit(?:y|ies)\s*[:：]\s*", re.IGNORECASE)
_BULLET = re.compile(r"^\s*(?:[-*•·]+|\d+\s*[.)]|\(\d+\))\s*")
_QUOTES = "\"'`“”‘’[]"


class ExtractionError(ValueError):
    def __init__(self, message: str, *, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class EntityMention:
    surface: str
    source_span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not self.surface.strip():
            raise ValueError("mention surface must be nonempty")


@dataclass(frozen=True)
class LinkedEntity:
    mention: EntityMention
    entity: EntityId
    similarity: float


def _format_exemplars(exemplars: Sequence[Exemplar]) -> str:
    blocks = [f"Question: {item.question}\nEntities: {', '.join(item.entities)}" for item in exemplars]
    return "\n\n".join(blocks)


def build_extraction_prompt(question: str, exemplars: Sequence[Exemplar], profile: PromptProfile) -> str:
    if not exemplars:
        raise ValueError("exemplars must be nonempty")
    return profile.extract_entities.format(exemplars=_format_exemplars(exemplars), question=question.strip())


def parse_entity_list(raw: str) -> list[str]:
    # An explicit "none" is an empty list; an empty or non-list reply raises ExtractionError.
    text = raw.strip()
    if not text:
        raise ExtractionError("empty entity-list reply", raw=raw)
    text = _LABEL_PREFIX.sub("", text, count=1).strip()
    if text.casefold() in _NONE_REPLIES or text.strip(_QUOTES + ". ").casefold() in _NONE_REPLIES:
        return []

    items: list[str] = []
    for line in text.split("\n"):
        line = _LABEL_PREFIX.sub("", line, count=1)
        for piece in line.split(","):
            cleaned = _BULLET.sub("", piece).strip().strip(_QUOTES).strip().rstrip(".;").strip()
            if cleaned:
                items.append(cleaned)
    if not items:
        raise ExtractionError("entity-list reply contains no entities", raw=raw)
    too_long = [item for item in items if len(item) > _MAX_MENTION_CHARS]
    if too_long:
        raise ExtractionError("reply is not an entity list", raw=raw)
    return items


def extract_entities(
    llm: LLMClient,
    question: str,
    exemplars: Sequence[Exemplar],
    *,
    profile: PromptProfile | None = None,
    params: CompletionParams,
) -> list[EntityMention]:
    profile = profile or load_profile()
    prompt = build_extraction_prompt(question, exemplars, profile)
    reply = llm.complete([system(profile.system_instruction), user(prompt)], params)
    surfaces = parse_entity_list(reply)

    mentions: list[EntityMention] = []
    seen: set[str] = set()
    folded_question = question.casefold()
    for surface in surfaces:
        key = surface.casefold()
        if key in seen:
            continue
        seen.add(key)
        start = folded_question.find(key)
        span = (start, start + len(surface)) if start >= 0 else None
        mentions.append(EntityMention(surface=surface, source_span=span))
    logger.info("Extracted mentions count=%s: %s", len(mentions), ", ".join(m.surface for m in mentions))
    return mentions


class EntityIndex:
    def __init__(self, graph: KnowledgeGraph, embedder: Embedder | None = None):
        if graph.entity_count == 0:
            raise GraphContractError("cannot link against an empty graph")
        self.graph = graph
        self.embedder = embedder or HashedTrigramEmbedder()
        self.vectors: list[Embedding] = [
            self.embedder.embed(graph.entity_label(EntityId(entity))) for entity in graph.entity_ids()
        ]
        self.matrix = np.vstack(self.vectors)

    def nearest(self, text: str) -> tuple[EntityId, float]:
        exact = self.graph.find_entity(text)
        if exact is not None:
            return exact, 1.0
        query = self.embedder.embed(text)
        scores = self.matrix @ query
        best = float(scores.max())
        shortlist = np.flatnonzero(scores >= best - _TIE_EPSILON)
        ranked = sorted(
            (-cosine(query, self.vectors[index]), int(index)) for index in shortlist
        )
        negative_similarity, entity = ranked[0]
        return EntityId(entity), -negative_similarity


def link(
    mentions: Sequence[EntityMention],
    graph: KnowledgeGraph,
    embedder: Embedder | None = None,
    *,
    min_similarity: float = 0.0,
    index: EntityIndex | None = None,
) -> list[LinkedEntity]:
    # Deduplicated by entity: the best mention wins, at the position the entity was first linked.
    index = index or EntityIndex(graph, embedder)
    linked: dict[EntityId, LinkedEntity] = {}
    for mention in mentions:
        entity, similarity = index.nearest(mention.surface)
        if min_similarity > 0 and similarity < min_similarity:
            logger.info(
                "Dropped mention %r: best similarity=%.3f below floor=%.3f",
                mention.surface,
                similarity,
                min_similarity,
            )
            continue
        current = linked.get(entity)
        if current is None or similarity > current.similarity:
            linked[entity] = LinkedEntity(mention=mention, entity=entity, similarity=similarity)
    for item in linked.values():
        logger.debug(
            "Linked %r -> %r similarity=%.3f",
            item.mention.surface,
            graph.entity_label(item.entity),
            item.similarity,
        )
    return list(linked.values())
