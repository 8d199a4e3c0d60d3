from __future__ import annotations

from pathlib import Path

import pytest

from graphmind.artifacts import RunStore, write_jsonl_atomic
from graphmind.config import ExplorationConfig, RunConfig, RunSettings
from graphmind.evalkit import AXES, AVERAGE_ROW
from graphmind.kg_store import KnowledgeGraph
from graphmind.llm_client import ChatMessage, CompletionParams, LLMTransportError
from graphmind.runner import (
    METHOD_BM25,
    METHOD_EMBED,
    METHOD_KGPATH,
    METHOD_MINDMAP,
    METHOD_VANILLA,
    BatchRunner,
    ManifestError,
    Question,
    join_manifests,
    load_manifest,
    load_questions,
    run_pairwise_eval,
    run_ranking_eval,
)
from graphmind.templates import load_profile
from scripted import AGGREGATE_NEIGHBOR, AGGREGATE_PATH, EXTRACT, FINAL, FIXTURES, ScriptedLLM, sample_answer

JUDGE = CompletionParams(model_id="judge")


def _extract(prompt: str) -> str:
    return "Fatigue, Nausea" if "Question: I feel tired" in prompt else "Cough, Fever"


def _rules(final: str | None = None) -> list:
    return [
        (EXTRACT, _extract),
        (AGGREGATE_PATH, "paths summary"),
        (AGGREGATE_NEIGHBOR, "neighbors summary"),
        (FINAL, final if final is not None else sample_answer()),
    ]


def _config(tmp_path: Path, workers: int = 1) -> RunConfig:
    return RunConfig(
        exploration=ExplorationConfig(tau=1.5),
        run=RunSettings(output_dir=tmp_path / "out", workers=workers),
    )


@pytest.fixture
def questions() -> list[Question]:
    return load_questions(FIXTURES / "questions.jsonl")


def test_load_questions(questions: list[Question]) -> None:
    assert [question.id for question in questions] == ["q1", "q2"]
    assert questions[1].reference.startswith("Pneumonia")


@pytest.mark.parametrize(
    ("content", "message"),
    [
        ('{"id": "q1", "question": "a"}\n{"id": "q1", "question": "b"}\n', "duplicate question id q1"),
        ('{"id": "q1", "question": "  "}\n', "nonempty question"),
        ("not json\n", "invalid JSON"),
    ],
)
def test_load_questions_rejects_bad_rows(tmp_path: Path, content: str, message: str) -> None:
    path = tmp_path / "questions.jsonl"
    path.write_text(content, encoding="utf-8")

    with pytest.raises(ManifestError, match=message):
        load_questions(path)


def test_mindmap_batch_writes_answers_and_manifest(
    tmp_path: Path, medical_graph: KnowledgeGraph, questions: list[Question]
) -> None:
    config = _config(tmp_path)
    llm = ScriptedLLM(_rules())

    rows = BatchRunner(config, medical_graph, llm).run(questions, METHOD_MINDMAP)

    assert [row["question_id"] for row in rows] == ["q1", "q2"]
    assert rows[0]["answer"].startswith("The patient may have a liver problem.")
    assert rows[0]["contexts"][0] == "Liver problem - has_symptom - (Fatigue, Nausea)"
    assert rows[1]["contexts"][0] == "Pneumonia - has_symptom - (Cough, Fever)"
    assert llm.calls == 8
    store = RunStore(config.run.output_dir)
    assert sorted(store.answers_dir.iterdir()) == sorted(
        store.answer_path(question_id, suffix) for question_id in ("q1", "q2") for suffix in (".json", ".dot")
    )
    assert load_manifest(config.run.output_dir / "manifest-mindmap.jsonl")["q2"]["method"] == METHOD_MINDMAP


def test_retrieval_baselines_use_graph_documents(
    tmp_path: Path, medical_graph: KnowledgeGraph, questions: list[Question]
) -> None:
    llm = ScriptedLLM([(FINAL, sample_answer())])
    runner = BatchRunner(_config(tmp_path), medical_graph, llm)

    bm25_rows = runner.run(questions, METHOD_BM25)
    embed_rows = runner.run(questions, METHOD_EMBED)

    assert [len(row["contexts"]) for row in bm25_rows + embed_rows] == [3, 3, 3, 3]
    # nothing in q1 matches a document term, so ids break the tie
    assert bm25_rows[0]["contexts"][2] == (
        "Hepatitis - need_medical_test - Blood test\n"
        "Anemia - need_medical_test - Blood test\n"
        "Blood test - can_check_disease - Diabetes"
    )
    assert bm25_rows[1]["contexts"][0].startswith("Pneumonia - has_symptom - Fever")
    evidence = llm.requests[0][2].content
    assert evidence.startswith("Combine the knowledge you already have")
    assert "Context 1: " in evidence
    assert llm.calls == 4


def test_kgpath_baseline_retrieves_pair_paths(
    tmp_path: Path, medical_graph: KnowledgeGraph, questions: list[Question]
) -> None:
    llm = ScriptedLLM(_rules())

    rows = BatchRunner(_config(tmp_path), medical_graph, llm).run(questions[:1], METHOD_KGPATH)

    assert rows[0]["contexts"] == ["Liver problem - has_symptom - (Fatigue, Nausea)"]
    assert llm.calls == 2


def test_vanilla_baseline_keeps_unstructured_replies(
    tmp_path: Path, medical_graph: KnowledgeGraph, questions: list[Question]
) -> None:
    llm = ScriptedLLM([(FINAL, "  Rest and drink water.  ")])

    rows = BatchRunner(_config(tmp_path, workers=2), medical_graph, llm).run(questions, METHOD_VANILLA)

    assert [row["answer"] for row in rows] == ["Rest and drink water."] * 2
    assert [row["contexts"] for row in rows] == [[], []]
    assert llm.requests[0][2].content == load_profile().no_evidence


class _FinalFailsFor(ScriptedLLM):
    """Fails the final prompt of any question containing ``needle``."""

    def __init__(self, rules, needle: str, failure: str | Exception):
        super().__init__(rules)
        self.needle = needle
        self.failure = failure

    def complete(self, messages: list[ChatMessage], params: CompletionParams) -> str:
        if FINAL in messages[-1].content and any(self.needle in message.content for message in messages):
            self.calls += 1
            if isinstance(self.failure, Exception):
                raise self.failure
            return self.failure
        return super().complete(messages, params)


def test_failed_question_is_recorded_and_batch_continues(tmp_path: Path, medical_graph: KnowledgeGraph) -> None:
    questions = [
        Question("a", "Why am I tired?", "rest"),
        Question("b", "Why do I cough?", "rest"),
        Question("c", "Why am I dizzy?", "rest"),
    ]
    llm = _FinalFailsFor([(FINAL, "Rest.")], "cough", LLMTransportError("endpoint down"))
    config = _config(tmp_path, workers=2)
    runner = BatchRunner(config, medical_graph, llm)

    rows = runner.run(questions, METHOD_VANILLA)

    assert [(row["question_id"], row["answer"]) for row in rows] == [("a", "Rest."), ("b", ""), ("c", "Rest.")]
    assert rows[1]["error"] == "LLMTransportError: endpoint down"
    assert "error" not in rows[0]
    assert [question_id for question_id, _ in runner.failures] == ["b"]
    manifest = load_manifest(config.run.output_dir / "manifest-vanilla.jsonl")
    assert list(manifest) == ["a", "b", "c"]
    assert manifest["b"]["error"].startswith("LLMTransportError")


def test_mindmap_parse_failure_keeps_other_answers(
    tmp_path: Path, medical_graph: KnowledgeGraph, questions: list[Question]
) -> None:
    config = _config(tmp_path)
    llm = _FinalFailsFor(_rules(), "cough", "Take a nap.")
    runner = BatchRunner(config, medical_graph, llm)

    rows = runner.run(questions, METHOD_MINDMAP)

    assert rows[0]["answer"].startswith("The patient may have a liver problem.")
    assert rows[1]["error"].startswith("PipelineError: parse stage failed")
    store = RunStore(config.run.output_dir)
    assert sorted(store.answers_dir.iterdir()) == sorted([store.answer_path("q1"), store.answer_path("q1", ".dot")])


def test_unknown_method(tmp_path: Path, medical_graph: KnowledgeGraph) -> None:
    with pytest.raises(ValueError, match="method must be one of"):
        BatchRunner(_config(tmp_path), medical_graph, ScriptedLLM([])).run([], "oracle")


def _manifest(path: Path, method: str, answers: dict[str, str], reference: str = "ref") -> Path:
    write_jsonl_atomic(
        path,
        [
            {"answer": answer, "contexts": [], "method": method, "question": "q", "question_id": qid, "reference": reference}
            for qid, answer in answers.items()
        ],
    )
    return path


def test_join_manifests_reports_missing_ids(tmp_path: Path) -> None:
    a = _manifest(tmp_path / "a.jsonl", "mindmap", {"q1": "x", "q2": "y"})
    b = _manifest(tmp_path / "b.jsonl", "vanilla", {"q1": "x"})

    with pytest.raises(ManifestError, match="lacks question id\\(s\\): q2"):
        join_manifests([(a, load_manifest(a)), (b, load_manifest(b))])


def test_pairwise_eval_reports_from_first_manifest_view(tmp_path: Path) -> None:
    a = _manifest(tmp_path / "a.jsonl", "mindmap", {"q1": "good", "q2": "good"})
    b = _manifest(tmp_path / "b.jsonl", "vanilla", {"q1": "bad", "q2": "bad"})
    judge = ScriptedLLM([("Reference:", lambda prompt: "1" if "output1: good" in prompt else "0")])

    rows = run_pairwise_eval(judge, a, b, [AXES["total_factualness"], AXES["drug_recommendation"]], params=JUDGE, seed=3)

    assert [(row.axis, row.win, row.tie, row.lose) for row in rows] == [
        ("total_factualness", 100.0, 0.0, 0.0),
        ("drug_recommendation", 100.0, 0.0, 0.0),
        (AVERAGE_ROW, 100.0, 0.0, 0.0),
    ]
    assert judge.calls == 4


def test_pairwise_eval_needs_a_reference(tmp_path: Path) -> None:
    a = _manifest(tmp_path / "a.jsonl", "mindmap", {"q1": "x"}, reference="")
    b = _manifest(tmp_path / "b.jsonl", "vanilla", {"q1": "y"}, reference="")

    with pytest.raises(ManifestError, match="no reference"):
        run_pairwise_eval(ScriptedLLM([]), a, b, [AXES["total_factualness"]], params=JUDGE, seed=0)


def test_ranking_eval_mean_ranks(tmp_path: Path) -> None:
    a = _manifest(tmp_path / "a.jsonl", "mindmap", {"q1": "good", "q2": "good"})
    b = _manifest(tmp_path / "b.jsonl", "vanilla", {"q1": "bad", "q2": "bad"})
    judge = ScriptedLLM([("Reference:", lambda prompt: "A > B" if "Answer A: good" in prompt else "B > A")])

    assert run_ranking_eval(judge, [a, b], params=JUDGE, seed=11) == [("mindmap", 1.0), ("vanilla", 2.0)]


def test_ranking_eval_needs_two_distinct_methods(tmp_path: Path) -> None:
    a = _manifest(tmp_path / "a.jsonl", "mindmap", {"q1": "x"})

    with pytest.raises(ManifestError, match="at least two"):
        run_ranking_eval(ScriptedLLM([]), [a], params=JUDGE, seed=0)

    same = _manifest(tmp_path / "a" / "a.jsonl", "mindmap", {"q1": "y"})
    with pytest.raises(ManifestError, match="distinct methods"):
        run_ranking_eval(ScriptedLLM([]), [a, same], params=JUDGE, seed=0)

