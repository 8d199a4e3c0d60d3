from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

from .aggregator import serialize_triples
from .artifacts import JsonlFormatError, iter_jsonl, write_jsonl_atomic
from .embedding import Embedder, HashedTrigramEmbedder, cosine
from .kg_store import DIRECTION_BOTH, DIRECTION_OUT, EntityId, KnowledgeGraph, bfs_within_k
from .reasoner import PromptBundle, format_question
from .templates import PromptProfile, load_profile
from .text import tokenize


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    term_counts: Counter[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "term_counts", Counter(tokenize(self.text)))

    @property
    def length(self) -> int:
        return sum(self.term_counts.values())


@dataclass(frozen=True)
class BM25Params:
    k1: float = 1.5
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be within [0, 1]")


class Corpus:
    def __init__(self, documents: Iterable[Document]):
        self.documents = tuple(documents)
        id_counts = Counter(document.id for document in self.documents)
        duplicates = sorted(doc_id for doc_id, count in id_counts.items() if count > 1)
        if duplicates:
            raise CorpusError(f"duplicate document id(s): {', '.join(duplicates)}")
        self.document_frequencies: Counter[str] = Counter()
        for document in self.documents:
            self.document_frequencies.update(document.term_counts.keys())
        total = sum(document.length for document in self.documents)
        self.avg_doc_length = total / len(self.documents) if self.documents else 0.0

    def __len__(self) -> int:
        return len(self.documents)

    def idf(self, term: str) -> float:
        df = self.document_frequencies.get(term, 0)
        return math.log(1 + (len(self.documents) - df + 0.5) / (df + 0.5))


def bm25_score(
    corpus: Corpus,
    query_terms: Sequence[str],
    doc: Document,
    params: BM25Params | None = None,
) -> float:
    """Okapi BM25 with IDF = ln(1 + (N - df + 0.5) / (df + 0.5))."""
    params = params or BM25Params()
    length_ratio = doc.length / corpus.avg_doc_length if corpus.avg_doc_length > 0 else 0.0
    norm = params.k1 * (1 - params.b + params.b * length_ratio)
    score = 0.0
    for term in query_terms:
        tf = doc.term_counts.get(term, 0)
        if tf == 0:
            continue
        score += corpus.idf(term) * (tf * (params.k1 + 1)) / (tf + norm)
    return score


def _top_ids(scored: Iterable[tuple[float, str]], top_k: int) -> list[str]:
    ranked = sorted(scored, key=lambda item: (-item[0], item[1]))
    return [doc_id for _, doc_id in ranked[:top_k]]


def _check_top_k(top_k: int) -> None:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")


def retrieve_bm25(corpus: Corpus, query: str, top_k: int, params: BM25Params | None = None) -> list[str]:
    _check_top_k(top_k)
    terms = tokenize(query)
    return _top_ids(((bm25_score(corpus, terms, doc, params), doc.id) for doc in corpus.documents), top_k)


def retrieve_embedding(corpus: Corpus, query: str, embedder: Embedder | None, top_k: int) -> list[str]:
    _check_top_k(top_k)
    embedder = embedder or HashedTrigramEmbedder()
    query_vector = embedder.embed(query)
    return _top_ids(
        ((cosine(query_vector, embedder.embed(doc.text)), doc.id) for doc in corpus.documents),
        top_k,
    )


def kg_retrieve_paths(graph: KnowledgeGraph, vq: Sequence[EntityId]) -> list[str]:
    """Shortest undirected route for every unordered pair of query entities."""
    entities = list(dict.fromkeys(vq))
    limit = max(1, graph.entity_count)
    routes: list[str] = []
    for source, target in combinations(entities, 2):
        path = bfs_within_k(graph, source, [target], limit)
        if path is None or not path.triples:
            continue
        text, _ = serialize_triples(graph, path.triples)
        routes.append(text)
    return routes


def build_documents_from_graph(graph: KnowledgeGraph) -> list[Document]:
    """One document per head entity: every triple incident to it, in file order."""
    documents = []
    for entity in graph.entity_ids():
        if not graph.neighbors(EntityId(entity), DIRECTION_OUT):
            continue
        incident = graph.neighbors(EntityId(entity), DIRECTION_BOTH)
        lines = [serialize_triples(graph, [triple])[0] for triple in incident]
        documents.append(Document(id=graph.entity_label(EntityId(entity)), text="\n".join(lines)))
    return documents


def load_corpus(path: Path) -> Corpus:
    documents = []
    try:
        for line_number, record in iter_jsonl(path):
            doc_id, text = record.get("id"), record.get("text")
            if not isinstance(doc_id, str) or not isinstance(text, str):
                raise CorpusError(f"{path}:{line_number}: corpus rows need string fields id and text")
            documents.append(Document(id=doc_id, text=text))
    except (OSError, JsonlFormatError) as exc:
        raise CorpusError(f"Cannot load corpus: {exc}") from exc
    return Corpus(documents)


def dump_corpus(path: Path, documents: Iterable[Document]) -> None:
    write_jsonl_atomic(path, ({"id": document.id, "text": document.text} for document in documents))


def build_retrieval_prompt(
    question: str,
    contexts: Sequence[str],
    profile: PromptProfile | None = None,
    *,
    choice_question: bool = False,
) -> PromptBundle:
    profile = profile or load_profile()
    if contexts:
        numbered = "\n".join(f"Context {number}: {context}" for number, context in enumerate(contexts, start=1))
        evidence_block = profile.retrieval.format(contexts=numbered)
    else:
        evidence_block = profile.no_evidence
    return PromptBundle(
        system_instruction=profile.system_instruction,
        question=format_question(question, profile, choice_question=choice_question),
        evidence_block=evidence_block,
        got_instruction=profile.got_instruction,
        exemplars=profile.exemplars,
    )


def build_vanilla_prompt(
    question: str,
    profile: PromptProfile | None = None,
    *,
    choice_question: bool = False,
) -> PromptBundle:
    return build_retrieval_prompt(question, (), profile, choice_question=choice_question)
