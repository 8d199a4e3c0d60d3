from __future__ import annotations

import random

import pytest

from graphmind.config import GATE_LLM, ExplorationConfig
from graphmind.embedding import HashedTrigramEmbedder
from graphmind.explorer import (
    KIND_NEIGHBOR,
    KIND_PATH,
    EvidenceSubgraph,
    evidence_graphs_to_dict,
    explore,
    explore_neighbor_based,
    explore_path_based,
    merge,
    prune,
)
from graphmind.kg_store import EntityId, KnowledgeGraph, graph_from_triples
from graphmind.llm_client import CompletionParams
from graphmind.templates import load_profile
from scripted import GATE, ScriptedLLM

CLOSED = ExplorationConfig(tau=1.5)
OPEN = ExplorationConfig(tau=-1.0)


def _ids(graph: KnowledgeGraph, *labels: str) -> list[EntityId]:
    found = [graph.find_entity(label) for label in labels]
    assert None not in found
    return found  # type: ignore[return-value]


def _triples(graph: KnowledgeGraph, subgraph: EvidenceSubgraph) -> list[tuple[str, str, str]]:
    return [graph.triple_labels(triple) for triple in subgraph.triples]


class _CountingGate:
    def __init__(self, accept: set[str]):
        self.accept = accept
        self.asked: list[str] = []

    def __call__(self, graph: KnowledgeGraph, entity: EntityId) -> bool:
        label = graph.entity_label(entity)
        self.asked.append(label)
        return label in self.accept


def _neighbors(graph: KnowledgeGraph, vq, cfg: ExplorationConfig = CLOSED, gate=None):
    embedder = HashedTrigramEmbedder()
    return explore_neighbor_based(graph, vq, embedder.embed("question"), embedder, cfg, gate=gate)


def test_path_based_connects_symptoms_through_shared_disease(medical_graph: KnowledgeGraph) -> None:
    vq = _ids(medical_graph, "Fatigue", "Nausea")

    subgraphs, augmented = explore_path_based(medical_graph, vq, ExplorationConfig())

    assert len(subgraphs) == 1
    assert subgraphs[0].kind == KIND_PATH
    assert medical_graph.entity_label(subgraphs[0].head) == "Fatigue"
    assert _triples(medical_graph, subgraphs[0]) == [
        ("Liver problem", "has_symptom", "Fatigue"),
        ("Liver problem", "has_symptom", "Nausea"),
    ]
    assert [medical_graph.entity_label(e) for e in augmented] == ["Fatigue", "Nausea", "Liver problem"]


def test_path_based_stitches_nearest_candidate_first() -> None:
    graph = graph_from_triples([("A", "r", "B"), ("B", "r", "C"), ("C", "r", "D")])

    subgraphs, augmented = explore_path_based(graph, _ids(graph, "A", "D", "B"), ExplorationConfig())

    assert len(subgraphs) == 1
    assert _triples(graph, subgraphs[0]) == [("A", "r", "B"), ("B", "r", "C"), ("C", "r", "D")]
    assert [graph.entity_label(e) for e in augmented] == ["A", "D", "B", "C"]


def test_path_based_retires_unreachable_start_and_keeps_going(small_graph: KnowledgeGraph) -> None:
    subgraphs, augmented = explore_path_based(small_graph, _ids(small_graph, "A", "E", "C"), ExplorationConfig())

    assert [small_graph.entity_label(sg.head) for sg in subgraphs] == ["A"]
    assert _triples(small_graph, subgraphs[0]) == [("A", "r", "B"), ("B", "r", "C")]
    assert [small_graph.entity_label(e) for e in augmented] == ["A", "E", "C", "B"]


def test_path_based_respects_hop_limit(small_graph: KnowledgeGraph) -> None:
    subgraphs, augmented = explore_path_based(small_graph, _ids(small_graph, "A", "C"), ExplorationConfig(k=1))

    assert subgraphs == []
    assert len(augmented) == 2


def test_path_based_needs_two_entities(small_graph: KnowledgeGraph) -> None:
    a = _ids(small_graph, "A")
    assert explore_path_based(small_graph, a + a, ExplorationConfig()) == ([], tuple(a))


def test_neighbor_based_with_closed_gate_keeps_first_hop(medical_graph: KnowledgeGraph) -> None:
    [subgraph] = _neighbors(medical_graph, _ids(medical_graph, "Fatigue"))

    assert subgraph.kind == KIND_NEIGHBOR
    assert _triples(medical_graph, subgraph) == [
        ("Liver problem", "has_symptom", "Fatigue"),
        ("Hepatitis", "has_symptom", "Fatigue"),
        ("Anemia", "has_symptom", "Fatigue"),
        ("Diabetes", "has_symptom", "Fatigue"),
    ]


def test_neighbor_based_with_open_gate_adds_second_hop(small_graph: KnowledgeGraph) -> None:
    [subgraph] = _neighbors(small_graph, _ids(small_graph, "A"), OPEN)

    assert _triples(small_graph, subgraph) == [("A", "r", "B"), ("B", "r", "C")]


def test_neighbor_gate_is_asked_once_per_entity(small_graph: KnowledgeGraph) -> None:
    gate = _CountingGate(accept={"B"})

    subgraphs = _neighbors(small_graph, _ids(small_graph, "A", "C"), gate=gate)

    assert gate.asked == ["B"]
    assert [small_graph.entity_label(sg.head) for sg in subgraphs] == ["A", "C"]
    assert _triples(small_graph, subgraphs[1]) == [("B", "r", "C"), ("A", "r", "B")]


def test_neighbor_based_skips_self_loops() -> None:
    graph = graph_from_triples([("A", "r", "A"), ("A", "r", "B")])
    gate = _CountingGate(accept=set())

    [subgraph] = _neighbors(graph, _ids(graph, "A"), gate=gate)

    assert gate.asked == ["B"]
    assert len(subgraph.triples) == 2


def test_llm_gate_asks_yes_no_per_neighbor(small_graph: KnowledgeGraph) -> None:
    llm = ScriptedLLM([(GATE, lambda prompt: "Yes, it is." if "'B'" in prompt else "No")])
    cfg = ExplorationConfig(relevance_gate=GATE_LLM)

    evidence = explore(
        small_graph,
        _ids(small_graph, "A"),
        "Is A linked to C?",
        cfg,
        llm=llm,
        profile=load_profile(),
        params=CompletionParams(model_id="test-model"),
    )

    assert llm.calls == 1
    assert _triples(small_graph, evidence.neighbor_subgraphs[0]) == [("A", "r", "B"), ("B", "r", "C")]


def test_llm_gate_requires_client(small_graph: KnowledgeGraph) -> None:
    with pytest.raises(ValueError, match="llm relevance gate"):
        explore(small_graph, _ids(small_graph, "A"), "q", ExplorationConfig(relevance_gate=GATE_LLM))


def _star_subgraphs(count: int) -> tuple[KnowledgeGraph, list[EvidenceSubgraph]]:
    graph = graph_from_triples([("H", "r", f"X{i}") for i in range(count)])
    hub = graph.find_entity("H")
    assert hub is not None
    subgraphs = [EvidenceSubgraph(KIND_NEIGHBOR, hub, (triple,)) for triple in graph.triples]
    return graph, subgraphs


def test_prune_caps_each_head_and_preserves_order() -> None:
    graph, subgraphs = _star_subgraphs(7)
    leaf = EvidenceSubgraph(KIND_NEIGHBOR, graph.triples[0].tail, (graph.triples[0],))
    cfg = ExplorationConfig(n_max=5, seed=7)

    kept = prune([*subgraphs, leaf], cfg)

    assert len(kept) == 6
    assert kept[-1] == leaf
    positions = [subgraphs.index(item) for item in kept[:-1]]
    assert positions == sorted(positions)
    assert prune([*subgraphs, leaf], cfg) == kept


def test_prune_sample_follows_the_seed() -> None:
    graph = graph_from_triples([(hub, "r", f"{hub}{i}") for i in range(7) for hub in ("H", "G")])
    subgraphs = [EvidenceSubgraph(KIND_NEIGHBOR, triple.head, (triple,)) for triple in graph.triples]
    hubs = _ids(graph, "H", "G")
    selections = set()

    for seed in range(40):
        kept = prune(subgraphs, ExplorationConfig(n_max=5, seed=seed))

        rng = random.Random(seed)
        expected = []
        for hub in hubs:
            members = [position for position, item in enumerate(subgraphs) if item.head == hub]
            expected.extend(members[index] for index in sorted(rng.sample(range(len(members)), 5)))
        assert [subgraphs.index(item) for item in kept] == sorted(expected)
        selections.add(tuple(subgraphs.index(item) for item in kept))

    assert len(selections) > 20


def test_prune_keeps_small_groups_untouched() -> None:
    _, subgraphs = _star_subgraphs(3)

    assert prune(subgraphs, ExplorationConfig(n_max=5)) == subgraphs


def test_subgraph_validation(small_graph: KnowledgeGraph) -> None:
    a, e = _ids(small_graph, "A", "E")
    with pytest.raises(ValueError, match="at least one triple"):
        EvidenceSubgraph(KIND_PATH, a, ())
    with pytest.raises(ValueError, match="not a node"):
        EvidenceSubgraph(KIND_PATH, e, (small_graph.triples[0],))
    with pytest.raises(ValueError, match="kind"):
        EvidenceSubgraph("sideways", a, (small_graph.triples[0],))


def test_explore_merges_and_serializes(medical_graph: KnowledgeGraph) -> None:
    evidence = explore(medical_graph, _ids(medical_graph, "Fatigue", "Nausea"), "tired and sick", CLOSED)

    payload = evidence_graphs_to_dict(evidence, medical_graph)

    assert payload["augmented_entities"] == ["Fatigue", "Nausea", "Liver problem"]
    assert [item["head"] for item in payload["path_based"]] == ["Fatigue"]
    assert [item["head"] for item in payload["neighbor_based"]] == ["Fatigue", "Nausea"]
    assert payload["neighbor_based"][1]["triples"][0] == ["Liver problem", "has_symptom", "Nausea"]


def test_explore_without_entities_is_empty(medical_graph: KnowledgeGraph) -> None:
    assert explore(medical_graph, [], "anything", CLOSED).is_empty


def test_neighbor_closure_on_random_graphs() -> None:
    rng = random.Random(42)
    for _ in range(100):
        size = rng.randint(2, 12)
        graph = graph_from_triples(
            (f"n{rng.randrange(size)}", "r", f"n{rng.randrange(size)}") for _ in range(rng.randint(1, 20))
        )
        seed = rng.choice(list(graph.entity_ids()))
        incident = {t for t in graph.triples if seed in (t.head, t.tail)}
        neighbors = {t.other_end(seed) for t in incident} - {seed}
        two_hop = incident | {t for t in graph.triples if t.head in neighbors or t.tail in neighbors}

        [closed] = _neighbors(graph, [seed], gate=lambda g, e: False)
        [opened] = _neighbors(graph, [seed], gate=lambda g, e: True)

        assert set(closed.triples) == incident
        assert set(opened.triples) == two_hop


def test_merge_partitions_kinds_and_dedups_augmented(small_graph: KnowledgeGraph) -> None:
    a, b, c = _ids(small_graph, "A", "B", "C")
    path = EvidenceSubgraph(kind=KIND_PATH, head=a, triples=tuple(small_graph.neighbors(a)))
    neighbor = EvidenceSubgraph(kind=KIND_NEIGHBOR, head=c, triples=tuple(small_graph.neighbors(c)))

    evidence = merge([path], [neighbor], [a, c, b, a])

    assert evidence.subgraphs(KIND_PATH) == (path,)
    assert evidence.subgraphs(KIND_NEIGHBOR) == (neighbor,)
    assert evidence.augmented_entities == (a, c, b)
    assert not evidence.is_empty
