from __future__ import annotations

import csv
import io
import random
import re
import string
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .artifacts import write_text_atomic
from .llm_client import CompletionParams, LLMClient, system, user
from .templates import PromptProfile, load_profile
from .text import tokenize

AVERAGE_ROW = "average"


class VerdictParseError(ValueError):
    def __init__(self, message: str, *, raw: str):
        super().__init__(message)
        self.raw = raw


class RankingParseError(ValueError):
    def __init__(self, message: str, *, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class Axis:
    name: str
    instruction: str


AXES: dict[str, Axis] = {
    axis.name: axis
    for axis in (
        Axis(
            "diversity_integrity",
            "According to the result in reference output, which output is better.",
        ),
        Axis(
            "total_factualness",
            "According to the facts of disease diagnosis and drug and tests recommendation in reference output, "
            "which output is better match.",
        ),
        Axis(
            "disease_diagnosis",
            "According to the disease diagnosis result in reference output, which output is better match.",
        ),
        Axis(
            "drug_recommendation",
            "According to the drug recommendation result in reference output, which output is better match.",
        ),
    )
}

_VERDICT_DIRECTIVE = (
    "If the output1 is better match, output '1'. If the output2 is better match, output '0'. "
    "If they are same match, output '2'."
)
_ANTI_TIE = 'If they are the same, output "2". Try to output "1" or "0".'
_VERDICT_DIGIT = re.compile(r"(?<![\w.])[012](?!\w|\.\d)")
_RANK_LABEL = re.compile(r"^(?:answer|output)?\s*[\[(]?\s*([A-Za-z])\s*[\])]?\s*[.:]?$", re.IGNORECASE)


class Verdict(Enum):
    OUT1_WINS = "1"
    OUT2_WINS = "0"
    TIE = "2"

    def swapped(self) -> "Verdict":
        if self is Verdict.OUT1_WINS:
            return Verdict.OUT2_WINS
        if self is Verdict.OUT2_WINS:
            return Verdict.OUT1_WINS
        return self


@dataclass(frozen=True)
class WinRateRow:
    axis: str
    win: float
    tie: float
    lose: float


@dataclass(frozen=True)
class SimilarityScore:
    precision: float
    recall: float
    f1: float


SimilarityScorer = Callable[[str, str], SimilarityScore]


def resolve_axis(name: str) -> Axis:
    try:
        return AXES[name]
    except KeyError as exc:
        raise ValueError(f"unknown axis {name!r}; expected one of {', '.join(AXES)}") from exc


def build_pairwise_prompt(reference: str, out1: str, out2: str, axis: Axis, *, anti_tie: bool = False) -> str:
    for name, value in (("reference", reference), ("output1", out1), ("output2", out2)):
        if not value.strip():
            raise ValueError(f"{name} must be nonempty")
    directive = f"{axis.instruction} {_VERDICT_DIRECTIVE}"
    if anti_tie:
        directive = f"{directive} {_ANTI_TIE}"
    return f"Reference: {reference}\n\noutput1: {out1}\n\noutput2: {out2}\n\n{directive}\n"


def parse_verdict(raw: str) -> Verdict:
    match = _VERDICT_DIGIT.search(raw)
    if match is None:
        raise VerdictParseError("judge reply contains no standalone 0/1/2 verdict", raw=raw)
    return Verdict(match.group(0))


def aggregate_winrates(verdicts: Mapping[str, Sequence[Verdict]]) -> list[WinRateRow]:
    """Win/tie/lose percentages per axis plus an unweighted ``average`` row."""
    if not verdicts:
        raise ValueError("at least one axis is required")
    rows = []
    for axis, items in verdicts.items():
        if not items:
            raise ValueError(f"axis {axis} has no verdicts")
        counts = Counter(items)
        total = len(items)
        rows.append(
            WinRateRow(
                axis=axis,
                win=100.0 * counts[Verdict.OUT1_WINS] / total,
                tie=100.0 * counts[Verdict.TIE] / total,
                lose=100.0 * counts[Verdict.OUT2_WINS] / total,
            )
        )
    rows.append(
        WinRateRow(
            axis=AVERAGE_ROW,
            win=sum(row.win for row in rows) / len(rows),
            tie=sum(row.tie for row in rows) / len(rows),
            lose=sum(row.lose for row in rows) / len(rows),
        )
    )
    return rows


def ranking_labels(n: int) -> list[str]:
    if not 2 <= n <= len(string.ascii_uppercase):
        raise ValueError(f"ranking needs between 2 and {len(string.ascii_uppercase)} answers")
    return list(string.ascii_uppercase[:n])


def build_ranking_prompt(reference: str, answers: Sequence[tuple[str, str]]) -> str:
    if len(answers) < 2:
        raise ValueError("ranking needs at least two answers")
    blocks = "\n\n".join(f"Answer {label}: {text}" for label, text in answers)
    example = " > ".join(label for label, _ in answers)
    return (
        f"Reference: {reference}\n\n{blocks}\n\n"
        "Using the reference as the ground truth, rank the quality of the answers above from best to worst. "
        f"Reply with the answer labels only, separated by '>', for example: {example}\n"
    )


def parse_ranking(raw: str, n: int) -> list[str]:
    labels = ranking_labels(n)
    lines = [line for line in raw.splitlines() if ">" in line]
    candidate = lines[0] if lines else raw.strip()
    parts = candidate.split(">") if ">" in candidate else re.split(r"[,\s]+", candidate)
    ordering = []
    for part in parts:
        match = _RANK_LABEL.match(part.strip())
        if match is None:
            raise RankingParseError(f"cannot read a label from {part.strip()!r}", raw=raw)
        ordering.append(match.group(1).upper())
    duplicates = sorted({label for label in ordering if ordering.count(label) > 1})
    if duplicates:
        raise RankingParseError(f"duplicate label(s) {', '.join(duplicates)}", raw=raw)
    missing = sorted(set(labels) - set(ordering))
    unknown = sorted(set(ordering) - set(labels))
    if missing or unknown:
        raise RankingParseError(
            f"ranking must order exactly {', '.join(labels)} (missing={missing} unknown={unknown})",
            raw=raw,
        )
    return ordering


def mean_ranks(rank_rows: Sequence[Sequence[float]]) -> list[float]:
    if not rank_rows:
        raise ValueError("at least one ranking is required")
    width = len(rank_rows[0])
    if any(len(row) != width for row in rank_rows):
        raise ValueError("all rank rows must cover the same methods")
    return [sum(row[column] for row in rank_rows) / len(rank_rows) for column in range(width)]


def lexical_overlap(candidate: str, reference: str) -> SimilarityScore:
    candidate_tokens = Counter(tokenize(candidate))
    reference_tokens = Counter(tokenize(reference))
    if not candidate_tokens and not reference_tokens:
        return SimilarityScore(1.0, 1.0, 1.0)
    overlap = sum((candidate_tokens & reference_tokens).values())
    if overlap == 0:
        return SimilarityScore(0.0, 0.0, 0.0)
    precision = overlap / sum(candidate_tokens.values())
    recall = overlap / sum(reference_tokens.values())
    return SimilarityScore(precision, recall, 2 * precision * recall / (precision + recall))


def score_similarity(candidate: str, reference: str, scorer: SimilarityScorer | None = None) -> SimilarityScore:
    return (scorer or lexical_overlap)(candidate, reference)


def judge_pairwise(
    llm: LLMClient,
    reference: str,
    answer_a: str,
    answer_b: str,
    axis: Axis,
    *,
    rng: random.Random,
    params: CompletionParams,
    anti_tie: bool = False,
    profile: PromptProfile | None = None,
) -> Verdict:
    """Verdict from ``answer_a``'s point of view; presentation order is randomized."""
    swap = rng.random() < 0.5
    first, second = (answer_b, answer_a) if swap else (answer_a, answer_b)
    prompt = build_pairwise_prompt(reference, first, second, axis, anti_tie=anti_tie)
    judge_system = (profile or load_profile()).judge_system
    verdict = parse_verdict(llm.complete([system(judge_system), user(prompt)], params))
    return verdict.swapped() if swap else verdict


def judge_ranking(
    llm: LLMClient,
    reference: str,
    answers: Mapping[str, str],
    *,
    rng: random.Random,
    params: CompletionParams,
    profile: PromptProfile | None = None,
) -> dict[str, int]:
    """Rank methods (1 = best) with shuffled, anonymized answer labels."""
    methods = list(answers)
    rng.shuffle(methods)
    labels = ranking_labels(len(methods))
    by_label = dict(zip(labels, methods))
    prompt = build_ranking_prompt(reference, [(label, answers[by_label[label]]) for label in labels])
    judge_system = (profile or load_profile()).judge_system
    ordering = parse_ranking(llm.complete([system(judge_system), user(prompt)], params), len(labels))
    return {by_label[label]: rank for rank, label in enumerate(ordering, start=1)}


def render_winrate_csv(rows: Sequence[WinRateRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("axis", "win", "tie", "lose"))
    for row in rows:
        writer.writerow((row.axis, f"{row.win:.2f}", f"{row.tie:.2f}", f"{row.lose:.2f}"))
    return buffer.getvalue()


def write_winrate_csv(path: Path, rows: Sequence[WinRateRow]) -> None:
    write_text_atomic(path, render_winrate_csv(rows))


def render_rank_csv(mean_rank_rows: Sequence[tuple[str, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("method", "mean_rank"))
    for method, value in mean_rank_rows:
        writer.writerow((method, f"{value:.4f}"))
    return buffer.getvalue()


def write_rank_csv(path: Path, mean_rank_rows: Sequence[tuple[str, float]]) -> None:
    write_text_atomic(path, render_rank_csv(mean_rank_rows))
