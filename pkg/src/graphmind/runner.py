from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .artifacts import JsonlFormatError, RunStore, iter_jsonl
from .baselines import (
    BM25Params,
    Corpus,
    build_documents_from_graph,
    build_retrieval_prompt,
    build_vanilla_prompt,
    kg_retrieve_paths,
    load_corpus,
    retrieve_bm25,
    retrieve_embedding,
)
from .config import RunConfig
from .embedding import Embedder, HashedTrigramEmbedder
from .evalkit import Axis, Verdict, WinRateRow, aggregate_winrates, judge_pairwise, judge_ranking, mean_ranks
from .kg_store import KnowledgeGraph
from .linking import EntityIndex, ExtractionError, extract_entities, link
from .llm_client import CompletionParams, LLMClient, LLMError
from .reasoner import (
    AnswerParseError,
    PipelineError,
    PromptBundle,
    answer_question,
    answer_to_dict,
    emit_dot,
    parse_answer,
)
from .templates import PromptProfile, load_profile

logger = logging.getLogger(__name__)

METHOD_MINDMAP = "mindmap"
METHOD_BM25 = "bm25"
METHOD_EMBED = "embed"
METHOD_KGPATH = "kgpath"
METHOD_VANILLA = "vanilla"
METHODS = (METHOD_MINDMAP, METHOD_BM25, METHOD_EMBED, METHOD_KGPATH, METHOD_VANILLA)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Question:
    id: str
    question: str
    reference: str = ""


def load_questions(path: Path) -> list[Question]:
    questions: list[Question] = []
    seen: set[str] = set()
    try:
        for line_number, record in iter_jsonl(path):
            question_id, text = record.get("id"), record.get("question")
            if question_id is None or not isinstance(text, str) or not text.strip():
                raise ManifestError(f"{path}:{line_number}: question rows need id and a nonempty question")
            question_id = str(question_id)
            if question_id in seen:
                raise ManifestError(f"{path}:{line_number}: duplicate question id {question_id}")
            seen.add(question_id)
            questions.append(Question(question_id, text, str(record.get("reference") or "")))
    except (OSError, JsonlFormatError) as exc:
        raise ManifestError(f"Cannot load questions: {exc}") from exc
    return questions


def load_manifest(path: Path) -> dict[str, dict[str, Any]]:
    rows: dict[str, dict[str, Any]] = {}
    try:
        for line_number, record in iter_jsonl(path):
            question_id = record.get("question_id")
            if question_id is None or not isinstance(record.get("answer"), str):
                raise ManifestError(f"{path}:{line_number}: manifest rows need question_id and answer")
            if record.get("error"):
                logger.warning("%s:%s: question %s failed in its batch run", path, line_number, question_id)
            rows[str(question_id)] = record
    except (OSError, JsonlFormatError) as exc:
        raise ManifestError(f"Cannot load manifest: {exc}") from exc
    return rows


def _answer_text(raw: str) -> str:
    try:
        summary = parse_answer(raw).summary
    except AnswerParseError:
        return raw.strip()
    return summary or raw.strip()


class BatchRunner:
    def __init__(
        self,
        config: RunConfig,
        graph: KnowledgeGraph,
        llm: LLMClient,
        *,
        profile: PromptProfile | None = None,
        embedder: Embedder | None = None,
    ):
        self.config = config
        self.graph = graph
        self.llm = llm
        self.profile = profile or load_profile(config.prompts.profile)
        self.embedder = embedder or HashedTrigramEmbedder()
        self.params = CompletionParams.from_config(config.llm)
        self.store = RunStore(config.run.output_dir)
        self._index: EntityIndex | None = None
        self._corpus: Corpus | None = None
        self.failures: list[tuple[str, Exception]] = []

    @property
    def index(self) -> EntityIndex:
        if self._index is None:
            self._index = EntityIndex(self.graph, self.embedder)
        return self._index

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            source = self.config.baselines.corpus
            if source is not None:
                self._corpus = load_corpus(source)
            else:
                self._corpus = Corpus(build_documents_from_graph(self.graph))
            logger.info("Baseline corpus documents=%s", len(self._corpus))
        return self._corpus

    def run(self, questions: Sequence[Question], method: str) -> list[dict[str, Any]]:
        if method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}")
        self.store.bootstrap()
        if method in {METHOD_MINDMAP, METHOD_KGPATH}:
            _ = self.index
        if method in {METHOD_BM25, METHOD_EMBED}:
            _ = self.corpus

        logger.info(
            "Starting batch method=%s questions=%s workers=%s",
            method,
            len(questions),
            self.config.run.workers,
        )
        with ThreadPoolExecutor(max_workers=self.config.run.workers) as pool:
            outcomes = list(pool.map(lambda question: self._run_guarded(question, method), questions))
        rows = [row for row, _ in outcomes]
        self.failures = [(row["question_id"], error) for row, error in outcomes if error is not None]
        target = self.store.save_manifest(method, rows)
        logger.info(
            "Wrote manifest rows=%s failed=%s path=%s llm_calls=%s",
            len(rows),
            len(self.failures),
            target,
            self.llm.calls,
        )
        return rows

    def _run_guarded(self, question: Question, method: str) -> tuple[dict[str, Any], Exception | None]:
        try:
            return self._run_one(question, method), None
        except (PipelineError, LLMError, ExtractionError) as exc:
            logger.error("Question question_id=%s method=%s failed: %s", question.id, method, exc)
            row = {
                "answer": "",
                "contexts": [],
                "error": f"{type(exc).__name__}: {exc}",
                "method": method,
                "question": question.question,
                "question_id": question.id,
                "reference": question.reference,
            }
            return row, exc

    def _run_one(self, question: Question, method: str) -> dict[str, Any]:
        logger.info("Answering question_id=%s method=%s", question.id, method)
        if method == METHOD_MINDMAP:
            answer, contexts = self._mindmap(question)
        else:
            contexts = self._contexts(question, method)
            if method == METHOD_VANILLA:
                bundle = build_vanilla_prompt(
                    question.question, self.profile, choice_question=self.config.prompts.choice_question
                )
            else:
                bundle = build_retrieval_prompt(
                    question.question,
                    contexts,
                    self.profile,
                    choice_question=self.config.prompts.choice_question,
                )
            answer = self._complete(bundle)
        return {
            "answer": answer,
            "contexts": contexts,
            "method": method,
            "question": question.question,
            "question_id": question.id,
            "reference": question.reference,
        }

    def _mindmap(self, question: Question) -> tuple[str, list[str]]:
        result = answer_question(
            self.llm,
            self.graph,
            question.question,
            self.config,
            profile=self.profile,
            embedder=self.embedder,
            index=self.index,
        )
        dot = emit_dot(result.answer, result.report)
        self.store.save_answer(question.id, answer_to_dict(result, self.graph), dot)
        routes = [route.text for route in (*result.reasoning.path_routes, *result.reasoning.neighbor_routes)]
        return result.answer.summary or result.answer.raw.strip(), routes

    def _contexts(self, question: Question, method: str) -> list[str]:
        top_k = self.config.baselines.top_k
        if method == METHOD_BM25:
            params = BM25Params(k1=self.config.baselines.bm25_k1, b=self.config.baselines.bm25_b)
            ids = retrieve_bm25(self.corpus, question.question, top_k, params)
        elif method == METHOD_EMBED:
            ids = retrieve_embedding(self.corpus, question.question, self.embedder, top_k)
        elif method == METHOD_KGPATH:
            mentions = extract_entities(
                self.llm,
                question.question,
                self.profile.extraction_exemplars,
                profile=self.profile,
                params=self.params,
            )
            linked = link(
                mentions,
                self.graph,
                self.embedder,
                min_similarity=self.config.linking.min_similarity,
                index=self.index,
            ) if mentions else []
            return kg_retrieve_paths(self.graph, [item.entity for item in linked])
        else:
            return []
        texts = {document.id: document.text for document in self.corpus.documents}
        return [texts[doc_id] for doc_id in ids]

    def _complete(self, bundle: PromptBundle) -> str:
        return _answer_text(self.llm.complete(bundle.to_messages(), self.params))


def join_manifests(manifests: Sequence[tuple[Path, dict[str, dict[str, Any]]]]) -> list[str]:
    """Question ids shared by every manifest, in the first manifest's order."""
    first_path, first_rows = manifests[0]
    problems = []
    for path, rows in manifests[1:]:
        missing = sorted(set(first_rows) - set(rows))
        extra = sorted(set(rows) - set(first_rows))
        if missing:
            problems.append(f"{path} lacks question id(s): {', '.join(missing)}")
        if extra:
            problems.append(f"{first_path} lacks question id(s): {', '.join(extra)}")
    if problems:
        raise ManifestError("; ".join(problems))
    return list(first_rows)


def _reference(question_id: str, manifests: Sequence[tuple[Path, dict[str, dict[str, Any]]]]) -> str:
    for _, rows in manifests:
        reference = str(rows[question_id].get("reference") or "")
        if reference.strip():
            return reference
    raise ManifestError(f"question id {question_id} has no reference answer")


def run_pairwise_eval(
    llm: LLMClient,
    manifest_a: Path,
    manifest_b: Path,
    axes: Sequence[Axis],
    *,
    params: CompletionParams,
    seed: int,
    anti_tie: bool = False,
    profile: PromptProfile | None = None,
) -> list[WinRateRow]:
    """Judge method A against method B on every axis; rows are from A's point of view."""
    manifests = [(manifest_a, load_manifest(manifest_a)), (manifest_b, load_manifest(manifest_b))]
    question_ids = join_manifests(manifests)
    rng = random.Random(seed)
    rows_a, rows_b = manifests[0][1], manifests[1][1]
    verdicts: dict[str, list[Verdict]] = {}
    for axis in axes:
        verdicts[axis.name] = [
            judge_pairwise(
                llm,
                _reference(question_id, manifests),
                rows_a[question_id]["answer"],
                rows_b[question_id]["answer"],
                axis,
                rng=rng,
                params=params,
                anti_tie=anti_tie,
                profile=profile,
            )
            for question_id in question_ids
        ]
        logger.info("Judged axis=%s questions=%s", axis.name, len(question_ids))
    return aggregate_winrates(verdicts)


def _method_names(manifests: Sequence[tuple[Path, dict[str, dict[str, Any]]]]) -> list[str]:
    names = []
    for path, rows in manifests:
        methods = {str(row.get("method") or "") for row in rows.values()}
        name = methods.pop() if len(methods) == 1 else ""
        names.append(name or path.stem)
    if len(set(names)) != len(names):
        names = [path.stem for path, _ in manifests]
    if len(set(names)) != len(names):
        raise ManifestError("manifests must belong to distinct methods")
    return names


def run_ranking_eval(
    llm: LLMClient,
    manifest_paths: Sequence[Path],
    *,
    params: CompletionParams,
    seed: int,
    profile: PromptProfile | None = None,
) -> list[tuple[str, float]]:
    if len(manifest_paths) < 2:
        raise ManifestError("ranking needs at least two manifests")
    manifests = [(path, load_manifest(path)) for path in manifest_paths]
    question_ids = join_manifests(manifests)
    methods = _method_names(manifests)
    rng = random.Random(seed)
    rank_rows = []
    for question_id in question_ids:
        answers = {method: rows[question_id]["answer"] for method, (_, rows) in zip(methods, manifests)}
        reference = _reference(question_id, manifests)
        ranks = judge_ranking(llm, reference, answers, rng=rng, params=params, profile=profile)
        rank_rows.append([ranks[method] for method in methods])
    return list(zip(methods, mean_ranks(rank_rows)))
