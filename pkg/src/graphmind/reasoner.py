from __future__ import annotations

import logging
import re
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Iterator, Sequence

import graphviz

from .aggregator import ReasoningGraph, aggregate, evidence_title
from .config import RunConfig
from .embedding import Embedder, HashedTrigramEmbedder
from .explorer import KIND_NEIGHBOR, KIND_PATH, EvidenceGraphs, evidence_graphs_to_dict, explore
from .kg_store import KnowledgeGraph
from .linking import EntityIndex, EntityMention, LinkedEntity, extract_entities, link
from .llm_client import ChatMessage, CompletionParams, LLMClient, LLMError, assistant, system, user
from .templates import PromptProfile, load_profile
from .text import normalize_label

logger = logging.getLogger(__name__)

EvidenceRef = tuple[str, int]

_MARKER = re.compile(
    r"^[ \t>]*(?:#+[ \t]*)?[*_]*[ \t]*output[ \t]*([123])[ \t]*[*_]*[ \t]*[:：][*_]*",
    re.IGNORECASE | re.MULTILINE,
)
_KIND_PATTERN = r"(?P<kind>path|neighbou?r|neighor)[ \t]*-?[ \t]*based[ \t]+evidence[ \t]*(?P<number>\d{1,9})"
_STEP = re.compile(
    rf"(?:{_KIND_PATTERN}|(?P<result>result)[ \t]*(?P<result_number>\d{1,9}))[ \t]*\((?P<body>[^()]*)\)",
    re.IGNORECASE,
)
_EVIDENCE_REF = re.compile(_KIND_PATTERN, re.IGNORECASE)
_ATTRIBUTION = re.compile(r"\((?P<source>[^()]*)\)[ \t]*[.,;]?[ \t]*$")
_TREE_PREFIX = re.compile(r"^[\s│|├└─•*+>`-]+")
_ARROW = re.compile(r"->|→")
_QUOTES = "'\"`‘’“”"


class AnswerParseError(ValueError):
    def __init__(self, message: str, *, raw: str):
        super().__init__(message)
        self.raw = raw


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PromptBundle:
    """The five parts of a final prompt, sent as a four-message conversation."""

    system_instruction: str
    question: str
    evidence_block: str
    got_instruction: str
    exemplars: str

    def __post_init__(self) -> None:
        for name in ("system_instruction", "question", "evidence_block", "got_instruction", "exemplars"):
            if not getattr(self, name).strip():
                raise ValueError(f"prompt part {name} must be nonempty")

    def to_messages(self) -> list[ChatMessage]:
        return [
            system(self.system_instruction),
            user(self.question),
            assistant(self.evidence_block),
            user(f"{self.got_instruction}\n\n{self.exemplars}"),
        ]

    def to_text(self) -> str:
        return "\n\n".join(
            (self.system_instruction, self.question, self.evidence_block, self.got_instruction, self.exemplars)
        ) + "\n"


def format_question(question: str, profile: PromptProfile, *, choice_question: bool = False) -> str:
    text = profile.question.format(question=question.strip())
    if choice_question:
        text = f"{text}\n{profile.choice_hint}"
    return text


def _evidence_section(title: str, routes: Sequence[Any], consolidated: str) -> str:
    lines = [f"### {title} evidence graphs"]
    lines.extend(f"{route.title}: {route.text}" for route in routes)
    if consolidated:
        lines.append(f"Description: {consolidated}")
    return "\n".join(lines)


def build_final_prompt(
    question: str,
    rg: ReasoningGraph,
    profile: PromptProfile | None = None,
    *,
    combine_knowledge: bool = True,
    choice_question: bool = False,
) -> PromptBundle:
    profile = profile or load_profile()
    if rg.is_empty:
        evidence_block = profile.no_evidence
    else:
        sections = []
        if combine_knowledge:
            sections.append(profile.combine_knowledge)
        if rg.path_routes:
            sections.append(_evidence_section("Path-based", rg.path_routes, rg.path_text))
        if rg.neighbor_routes:
            sections.append(_evidence_section("Neighbor-based", rg.neighbor_routes, rg.neighbor_text))
        evidence_block = "\n\n".join(sections)
    return PromptBundle(
        system_instruction=profile.system_instruction,
        question=format_question(question, profile, choice_question=choice_question),
        evidence_block=evidence_block,
        got_instruction=profile.got_instruction,
        exemplars=profile.exemplars,
    )


@dataclass(frozen=True)
class InferenceStep:
    evidence_ref: EvidenceRef | None
    chain: tuple[str, ...]
    is_result: bool = False
    result_number: int | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.chain:
            raise ValueError("inference step chain must be nonempty")
        if not self.is_result and self.evidence_ref is None:
            raise ValueError("non-result steps must carry an evidence reference")


@dataclass(frozen=True)
class TreeNode:
    label: str
    evidence_ref: EvidenceRef | None
    parent: int | None
    depth: int


@dataclass(frozen=True)
class MindMapAnswer:
    summary: str
    steps: tuple[InferenceStep, ...]
    tree: tuple[TreeNode, ...]
    raw: str
    warnings: tuple[str, ...] = ()

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return tuple((node.parent, index) for index, node in enumerate(self.tree) if node.parent is not None)


@dataclass(frozen=True)
class GroundedNode:
    label: str
    origin: EvidenceRef


@dataclass(frozen=True)
class GroundingReport:
    grounded: tuple[GroundedNode, ...]
    augmented: tuple[str, ...]

    def origin_of(self, label: str) -> EvidenceRef | None:
        for node in self.grounded:
            if node.label == label:
                return node.origin
        return None


def _ref_kind(text: str) -> str:
    return KIND_PATH if text.casefold().startswith("path") else KIND_NEIGHBOR


def _clean_token(token: str) -> str:
    return token.strip().strip(_QUOTES).strip()


def _split_sections(raw: str) -> dict[int, str]:
    matches = list(_MARKER.finditer(raw))
    first: dict[int, re.Match[str]] = {}
    for match in matches:
        first.setdefault(int(match.group(1)), match)
    ordered = sorted(first.values(), key=lambda match: match.start())
    sections: dict[int, str] = {}
    for match in ordered:
        following = [other.start() for other in matches if other.start() > match.start()]
        end = min(following) if following else len(raw)
        sections[int(match.group(1))] = raw[match.end() : end]
    return sections


def _resolves(ref: EvidenceRef, rg: ReasoningGraph | None) -> bool:
    return rg is not None and rg.route(ref[0], ref[1]) is not None


def _parse_steps(text: str, rg: ReasoningGraph | None, warnings: list[str]) -> list[InferenceStep]:
    steps: list[InferenceStep] = []
    for match in _STEP.finditer(text):
        chain = tuple(token for token in (_clean_token(part) for part in _ARROW.split(match.group("body"))) if token)
        if not chain:
            warnings.append(f"Output2: empty step {match.group(0)!r} skipped")
            continue
        if match.group("result"):
            steps.append(InferenceStep(None, chain, is_result=True, result_number=int(match.group("result_number"))))
            continue
        ref = (_ref_kind(match.group("kind")), int(match.group("number")))
        step_warnings: tuple[str, ...] = ()
        if rg is not None and not _resolves(ref, rg):
            message = f"Output2: unresolved reference {evidence_title(*ref)}"
            step_warnings = (message,)
            warnings.append(message)
        steps.append(InferenceStep(ref, chain, warnings=step_warnings))
    if not steps and text.strip():
        warnings.append("Output2: no inference steps could be parsed")
    return steps


def _parse_tree(text: str, warnings: list[str]) -> list[TreeNode]:
    nodes: list[TreeNode] = []
    stack: list[tuple[int, int]] = []
    for line in text.split("\n"):
        expanded = line.expandtabs(4).rstrip()
        stripped = expanded.strip()
        if not stripped or stripped.startswith("```"):
            continue
        indent = len(expanded) - len(expanded.lstrip())
        content = _TREE_PREFIX.sub("", expanded)
        while stack and stack[-1][0] >= indent:
            stack.pop()
        parent = stack[-1][1] if stack else None
        last: int | None = None
        for piece in _ARROW.split(content):
            piece = piece.strip()
            ref: EvidenceRef | None = None
            attribution = _ATTRIBUTION.search(piece)
            if attribution:
                ref_match = _EVIDENCE_REF.search(attribution.group("source"))
                if ref_match:
                    ref = (_ref_kind(ref_match.group("kind")), int(ref_match.group("number")))
                piece = piece[: attribution.start()]
            label = _clean_token(piece)
            if not label:
                continue
            depth = nodes[parent].depth + 1 if parent is not None else 0
            nodes.append(TreeNode(label=label, evidence_ref=ref, parent=parent, depth=depth))
            last = len(nodes) - 1
            parent = last
        if last is not None:
            stack.append((indent, last))
    if not nodes and text.strip():
        warnings.append("Output3: no tree nodes could be parsed")
    return nodes


def parse_answer(raw: str, rg: ReasoningGraph | None = None) -> MindMapAnswer:
    # Unparsable sections become warnings; only a reply without any Output marker is rejected.
    sections = _split_sections(raw)
    if not sections:
        raise AnswerParseError("answer contains none of the Output1/Output2/Output3 markers", raw=raw)
    warnings: list[str] = []
    for number in (1, 2, 3):
        if number not in sections:
            warnings.append(f"Output{number}: section missing")

    steps = _parse_steps(sections.get(2, ""), rg, warnings)
    tree = _parse_tree(sections.get(3, ""), warnings)
    step_refs = {step.evidence_ref for step in steps if step.evidence_ref is not None}
    for node in tree:
        if node.evidence_ref is not None and node.evidence_ref not in step_refs and not _resolves(node.evidence_ref, rg):
            warnings.append(f"Output3: node {node.label!r} cites unresolved {evidence_title(*node.evidence_ref)}")

    for warning in warnings:
        logger.warning("Answer parse warning: %s", warning)
    return MindMapAnswer(
        summary=sections.get(1, "").strip(),
        steps=tuple(steps),
        tree=tuple(tree),
        raw=raw,
        warnings=tuple(warnings),
    )


def _render_step(step: InferenceStep) -> str:
    body = "->".join(f"'{token}'" for token in step.chain)
    if step.is_result:
        return f"result {step.result_number}({body})"
    assert step.evidence_ref is not None
    return f"{evidence_title(*step.evidence_ref)}({body})"


def render_answer(answer: MindMapAnswer) -> str:
    tree_lines = []
    for node in answer.tree:
        source = f"({evidence_title(*node.evidence_ref)})" if node.evidence_ref else ""
        tree_lines.append(f"{'    ' * node.depth}'{node.label}'{source}")
    return (
        f"Output1: {answer.summary}\n\n"
        f"Output2: {'->'.join(_render_step(step) for step in answer.steps)}\n\n"
        "Output3:\n" + "\n".join(tree_lines) + "\n"
    )


def _route_keys(rg: ReasoningGraph) -> list[tuple[EvidenceRef, set[str]]]:
    keyed = []
    for kind in (KIND_PATH, KIND_NEIGHBOR):
        for route in rg.routes(kind):
            labels = {normalize_label(label) for label in (*route.node_labels(), *route.relation_labels())}
            keyed.append(((kind, route.number), labels))
    return keyed


def ground(answer: MindMapAnswer, rg: ReasoningGraph) -> GroundingReport:
    keyed = _route_keys(rg)
    by_ref = dict(keyed)
    grounded: list[GroundedNode] = []
    augmented: list[str] = []
    decided: set[str] = set()
    for node in answer.tree:
        if node.label in decided:
            continue
        decided.add(node.label)
        key = normalize_label(node.label)
        origin: EvidenceRef | None = None
        if key:
            if node.evidence_ref is not None and key in by_ref.get(node.evidence_ref, set()):
                origin = node.evidence_ref
            else:
                origin = next((ref for ref, labels in keyed if key in labels), None)
        if origin is None:
            augmented.append(node.label)
        else:
            grounded.append(GroundedNode(label=node.label, origin=origin))
    return GroundingReport(grounded=tuple(grounded), augmented=tuple(augmented))


def emit_dot(answer: MindMapAnswer, report: GroundingReport) -> str:
    dot = graphviz.Digraph("mindmap", node_attr={"shape": "box"})
    for index, node in enumerate(answer.tree):
        origin = report.origin_of(node.label)
        if origin is None:
            dot.node(f"n{index}", label=node.label, style="dashed", color="red")
        else:
            dot.node(f"n{index}", label=node.label, style="solid", tooltip=evidence_title(*origin))
    for parent, child in answer.edges:
        dot.edge(f"n{parent}", f"n{child}")
    return dot.source


@dataclass(frozen=True)
class PipelineResult:
    question: str
    answer: MindMapAnswer
    report: GroundingReport
    evidence: EvidenceGraphs
    reasoning: ReasoningGraph
    mentions: tuple[EntityMention, ...]
    linked: tuple[LinkedEntity, ...]
    prompt: PromptBundle
    evidence_free: bool


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except (LLMError, ValueError, RuntimeError) as exc:
        logger.error("Pipeline stage=%s failed: %s", name, exc)
        raise PipelineError(name, exc) from exc


def answer_question(
    llm: LLMClient,
    graph: KnowledgeGraph,
    question: str,
    cfg: RunConfig,
    *,
    profile: PromptProfile | None = None,
    embedder: Embedder | None = None,
    index: EntityIndex | None = None,
) -> PipelineResult:
    profile = profile or load_profile(cfg.prompts.profile)
    embedder = embedder or HashedTrigramEmbedder()
    params = CompletionParams.from_config(cfg.llm)

    with _stage("extract"):
        mentions = extract_entities(llm, question, profile.extraction_exemplars, profile=profile, params=params)
    with _stage("link"):
        linked = link(
            mentions,
            graph,
            embedder,
            min_similarity=cfg.linking.min_similarity,
            index=index,
        ) if mentions else []
    with _stage("explore"):
        evidence = explore(
            graph,
            [item.entity for item in linked],
            question,
            cfg.exploration,
            embedder=embedder,
            llm=llm,
            profile=profile,
            params=params,
        )
    with _stage("aggregate"):
        reasoning = aggregate(llm, evidence, graph, profile=profile, params=params)
    evidence_free = reasoning.is_empty
    if evidence_free:
        logger.warning("No evidence found for question; answering without KG evidence")
    with _stage("reason"):
        bundle = build_final_prompt(
            question,
            reasoning,
            profile,
            combine_knowledge=cfg.prompts.combine_knowledge,
            choice_question=cfg.prompts.choice_question,
        )
        raw = llm.complete(bundle.to_messages(), params)
    with _stage("parse"):
        answer = parse_answer(raw, reasoning)
    report = ground(answer, reasoning)
    logger.info(
        "Answered question grounded=%s augmented=%s steps=%s",
        len(report.grounded),
        len(report.augmented),
        len(answer.steps),
    )
    return PipelineResult(
        question=question,
        answer=answer,
        report=report,
        evidence=evidence,
        reasoning=reasoning,
        mentions=tuple(mentions),
        linked=tuple(linked),
        prompt=bundle,
        evidence_free=evidence_free,
    )


def _ref_text(ref: EvidenceRef | None) -> str | None:
    return evidence_title(*ref) if ref is not None else None


def answer_to_dict(result: PipelineResult, graph: KnowledgeGraph) -> dict[str, Any]:
    answer = result.answer
    return {
        "question": result.question,
        "summary": answer.summary,
        "text": render_answer(answer),
        "raw": answer.raw,
        "evidence_free": result.evidence_free,
        "warnings": list(answer.warnings),
        "mentions": [mention.surface for mention in result.mentions],
        "linked": [
            {
                "mention": item.mention.surface,
                "entity": graph.entity_label(item.entity),
                "similarity": round(item.similarity, 6),
            }
            for item in result.linked
        ],
        "steps": [
            {
                "evidence": _ref_text(step.evidence_ref),
                "chain": list(step.chain),
                "is_result": step.is_result,
                "result_number": step.result_number,
                "warnings": list(step.warnings),
            }
            for step in answer.steps
        ],
        "tree": {
            "nodes": [
                {"id": index, "label": node.label, "evidence": _ref_text(node.evidence_ref), "parent": node.parent}
                for index, node in enumerate(answer.tree)
            ],
            "edges": [list(edge) for edge in answer.edges],
        },
        "grounding": {
            "grounded": [{"label": node.label, "evidence": _ref_text(node.origin)} for node in result.report.grounded],
            "augmented": list(result.report.augmented),
        },
        "evidence": evidence_graphs_to_dict(result.evidence, graph),
        "routes": {
            "path_based": [route.text for route in result.reasoning.path_routes],
            "neighbor_based": [route.text for route in result.reasoning.neighbor_routes],
            "path_description": result.reasoning.path_text,
            "neighbor_description": result.reasoning.neighbor_text,
        },
    }
