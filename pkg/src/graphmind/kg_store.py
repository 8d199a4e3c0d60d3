from __future__ import annotations

import csv
import io
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, NewType

from .text import normalize_label

logger = logging.getLogger(__name__)

EntityId = NewType("EntityId", int)
RelationId = NewType("RelationId", int)

FORMAT_CSV = "triples-csv"
FORMAT_JSONL = "triples-jsonl"
GRAPH_FORMATS = (FORMAT_CSV, FORMAT_JSONL)

DIRECTION_OUT = "out"
DIRECTION_IN = "in"
DIRECTION_BOTH = "both"
_DIRECTIONS = (DIRECTION_OUT, DIRECTION_IN, DIRECTION_BOTH)

_CSV_HEADER = ("head", "relation", "tail")


class GraphLoadError(ValueError):
    def __init__(self, message: str, *, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
        self.line = line


class GraphEncodingError(GraphLoadError):
    pass


class GraphContractError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Triple:
    head: EntityId
    relation: RelationId
    tail: EntityId

    def other_end(self, entity: EntityId) -> EntityId:
        return self.tail if entity == self.head else self.head


@dataclass(frozen=True)
class HopPath:
    triples: tuple[Triple, ...]
    endpoints: tuple[EntityId, EntityId]
    nodes: tuple[EntityId, ...]

    @property
    def hops(self) -> int:
        return len(self.triples)


@dataclass
class LoadReport:
    records_read: int = 0
    deduplicated: int = 0
    rejected: int = 0
    errors: list[GraphLoadError] = field(default_factory=list)
    entities: int = 0
    relations: int = 0
    triples: int = 0

    def summary_line(self) -> str:
        return (
            f"entities={self.entities} relations={self.relations} triples={self.triples} "
            f"records={self.records_read} deduplicated={self.deduplicated} rejected={self.rejected}"
        )


@dataclass(frozen=True)
class LabelTable:
    originals: tuple[str, ...]
    normalized: tuple[str, ...]
    index: dict[str, int]

    def __len__(self) -> int:
        return len(self.originals)

    def lookup(self, label: str) -> int | None:
        return self.index.get(normalize_label(label))


class KnowledgeGraph:
    def __init__(
        self,
        entities: LabelTable,
        relations: LabelTable,
        triples: tuple[Triple, ...],
        out_adjacency: tuple[tuple[int, ...], ...],
        in_adjacency: tuple[tuple[int, ...], ...],
        report: LoadReport | None = None,
    ):
        self.entities = entities
        self.relations = relations
        self.triples = triples
        self.out_adjacency = out_adjacency
        self.in_adjacency = in_adjacency
        self.report = report or LoadReport(
            entities=len(entities), relations=len(relations), triples=len(triples)
        )

    @property
    def entity_count(self) -> int:
        return len(self.entities)

    @property
    def relation_count(self) -> int:
        return len(self.relations)

    def entity_ids(self) -> range:
        return range(len(self.entities))

    def entity_label(self, entity: EntityId) -> str:
        self.check_entity(entity)
        return self.entities.originals[entity]

    def entity_key(self, entity: EntityId) -> str:
        self.check_entity(entity)
        return self.entities.normalized[entity]

    def relation_label(self, relation: RelationId) -> str:
        if not 0 <= relation < len(self.relations):
            raise GraphContractError(f"invalid relation id {relation}")
        return self.relations.originals[relation]

    def triple_labels(self, triple: Triple) -> tuple[str, str, str]:
        return (
            self.entity_label(triple.head),
            self.relation_label(triple.relation),
            self.entity_label(triple.tail),
        )

    def check_entity(self, entity: int) -> None:
        if isinstance(entity, bool) or not isinstance(entity, int) or not 0 <= entity < len(self.entities):
            raise GraphContractError(f"invalid entity id {entity!r}")

    def find_entity(self, label: str) -> EntityId | None:
        found = self.entities.lookup(label)
        return EntityId(found) if found is not None else None

    def neighbors(self, entity: EntityId, direction: str = DIRECTION_BOTH) -> list[Triple]:
        self.check_entity(entity)
        if direction not in _DIRECTIONS:
            raise GraphContractError(f"direction must be one of {', '.join(_DIRECTIONS)}")
        if direction == DIRECTION_OUT:
            indexes: Iterable[int] = self.out_adjacency[entity]
        elif direction == DIRECTION_IN:
            indexes = self.in_adjacency[entity]
        else:
            indexes = sorted(set(self.out_adjacency[entity]) | set(self.in_adjacency[entity]))
        return [self.triples[index] for index in indexes]

    def undirected_steps(self, entity: EntityId) -> Iterator[tuple[EntityId, Triple]]:
        for triple in self.neighbors(entity, DIRECTION_BOTH):
            yield triple.other_end(entity), triple


class GraphBuilder:
    def __init__(self) -> None:
        self._entity_originals: list[str] = []
        self._entity_normalized: list[str] = []
        self._entity_index: dict[str, int] = {}
        self._relation_originals: list[str] = []
        self._relation_normalized: list[str] = []
        self._relation_index: dict[str, int] = {}
        self._triples: list[Triple] = []
        self._seen: set[Triple] = set()
        self.report = LoadReport()

    def add(self, head: str, relation: str, tail: str, *, line: int | None = None) -> bool:
        keys = [normalize_label(value) for value in (head, relation, tail)]
        if not all(keys):
            self.reject(GraphLoadError("record has an empty field", line=line))
            return False
        self.report.records_read += 1
        triple = Triple(
            head=EntityId(self._intern_entity(head.strip(), keys[0])),
            relation=RelationId(self._intern_relation(relation.strip(), keys[1])),
            tail=EntityId(self._intern_entity(tail.strip(), keys[2])),
        )
        if triple in self._seen:
            self.report.deduplicated += 1
            return False
        self._seen.add(triple)
        self._triples.append(triple)
        return True

    def reject(self, error: GraphLoadError) -> None:
        self.report.records_read += 1
        self.report.rejected += 1
        self.report.errors.append(error)
        logger.warning("Rejected KG record: %s", error)

    def build(self) -> KnowledgeGraph:
        out_lists: list[list[int]] = [[] for _ in self._entity_originals]
        in_lists: list[list[int]] = [[] for _ in self._entity_originals]
        for index, triple in enumerate(self._triples):
            out_lists[triple.head].append(index)
            in_lists[triple.tail].append(index)
        self.report.entities = len(self._entity_originals)
        self.report.relations = len(self._relation_originals)
        self.report.triples = len(self._triples)
        return KnowledgeGraph(
            entities=LabelTable(
                originals=tuple(self._entity_originals),
                normalized=tuple(self._entity_normalized),
                index=dict(self._entity_index),
            ),
            relations=LabelTable(
                originals=tuple(self._relation_originals),
                normalized=tuple(self._relation_normalized),
                index=dict(self._relation_index),
            ),
            triples=tuple(self._triples),
            out_adjacency=tuple(tuple(items) for items in out_lists),
            in_adjacency=tuple(tuple(items) for items in in_lists),
            report=self.report,
        )

    def _intern_entity(self, original: str, key: str) -> int:
        if key not in self._entity_index:
            self._entity_index[key] = len(self._entity_originals)
            self._entity_originals.append(original)
            self._entity_normalized.append(key)
        return self._entity_index[key]

    def _intern_relation(self, original: str, key: str) -> int:
        if key not in self._relation_index:
            self._relation_index[key] = len(self._relation_originals)
            self._relation_originals.append(original)
            self._relation_normalized.append(key)
        return self._relation_index[key]


def graph_from_triples(rows: Iterable[tuple[str, str, str]]) -> KnowledgeGraph:
    builder = GraphBuilder()
    for head, relation, tail in rows:
        builder.add(head, relation, tail)
    return builder.build()


def load_graph(source: BinaryIO | bytes, fmt: str) -> KnowledgeGraph:
    if fmt not in GRAPH_FORMATS:
        raise GraphLoadError(f"format must be one of {', '.join(GRAPH_FORMATS)}")
    data = source if isinstance(source, bytes) else source.read()
    text = _decode(data)
    builder = GraphBuilder()
    if fmt == FORMAT_CSV:
        _read_csv(text, builder)
    else:
        _read_jsonl(text, builder)
    graph = builder.build()
    logger.info("Loaded knowledge graph %s", graph.report.summary_line())
    return graph


def load_graph_file(path: str | Path, fmt: str | None = None) -> KnowledgeGraph:
    graph_path = Path(path)
    with graph_path.open("rb") as handle:
        return load_graph(handle, fmt or infer_format(graph_path))


def infer_format(path: Path) -> str:
    return FORMAT_JSONL if path.suffix.lower() in {".jsonl", ".ndjson"} else FORMAT_CSV


def dump_csv(graph: KnowledgeGraph) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_CSV_HEADER)
    for triple in sorted(graph.triples):
        writer.writerow(graph.triple_labels(triple))
    return buffer.getvalue()


def bfs_within_k(
    graph: KnowledgeGraph,
    src: EntityId,
    targets: Iterable[EntityId],
    k: int,
) -> HopPath | None:
    """Minimal-hop undirected path from ``src`` to the nearest target.

    Equal-hop targets resolve to the smallest id; among equal-hop paths to that
    target the lexicographically smallest node sequence wins.
    """
    target_set = set(targets)
    if k < 1:
        raise GraphContractError("k must be >= 1")
    if not target_set:
        raise GraphContractError("targets must be nonempty")
    graph.check_entity(src)
    for target in target_set:
        graph.check_entity(target)

    if src in target_set:
        return HopPath(triples=(), endpoints=(src, src), nodes=(src,))

    distance = _distances(graph, src, k)
    reachable = [target for target in target_set if target in distance]
    if not reachable:
        return None
    goal = min(reachable, key=lambda target: (distance[target], target))
    hops = distance[goal]
    to_goal = _distances(graph, goal, hops)

    nodes = [src]
    triples: list[Triple] = []
    current = src
    for step in range(hops):
        remaining = hops - step - 1
        best: tuple[EntityId, Triple] | None = None
        for other, triple in graph.undirected_steps(current):
            if to_goal.get(other) != remaining or distance.get(other) != step + 1:
                continue
            if best is None or (other, triple) < best:
                best = (other, triple)
        if best is None:
            raise RuntimeError(f"path reconstruction failed between {src} and {goal}")
        current, triple = best
        nodes.append(current)
        triples.append(triple)
    return HopPath(triples=tuple(triples), endpoints=(src, goal), nodes=tuple(nodes))


def _distances(graph: KnowledgeGraph, origin: EntityId, limit: int) -> dict[EntityId, int]:
    distance = {origin: 0}
    queue = deque([origin])
    while queue:
        node = queue.popleft()
        if distance[node] >= limit:
            continue
        for other, _ in graph.undirected_steps(node):
            if other not in distance:
                distance[other] = distance[node] + 1
                queue.append(other)
    return distance


def _decode(data: bytes) -> str:
    try:
        return data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        line = data.count(b"\n", 0, exc.start) + 1
        raise GraphEncodingError(f"stream is not valid UTF-8 ({exc.reason})", line=line) from exc


def _read_csv(text: str, builder: GraphBuilder) -> None:
    reader = csv.reader(io.StringIO(text))
    header_seen = False
    for row in reader:
        line = reader.line_num
        if not header_seen:
            if tuple(cell.strip().lower() for cell in row) != _CSV_HEADER:
                raise GraphLoadError("missing required header head,relation,tail", line=line)
            header_seen = True
            continue
        if not row:
            continue
        if len(row) != 3:
            builder.reject(GraphLoadError(f"expected 3 fields, found {len(row)}", line=line))
            continue
        builder.add(row[0], row[1], row[2], line=line)
    if not header_seen:
        raise GraphLoadError("missing required header head,relation,tail", line=1)


def _read_jsonl(text: str, builder: GraphBuilder) -> None:
    # Labels may contain a raw U+2028; only "\n" ends a record.
    for line_number, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            builder.reject(GraphLoadError(f"invalid JSON ({exc.msg})", line=line_number))
            continue
        if not isinstance(record, dict) or set(record) != set(_CSV_HEADER):
            builder.reject(GraphLoadError("record must have exactly head, relation, tail", line=line_number))
            continue
        if not all(isinstance(record[key], str) for key in _CSV_HEADER):
            builder.reject(GraphLoadError("head, relation, tail must be strings", line=line_number))
            continue
        builder.add(record["head"], record["relation"], record["tail"], line=line_number)
