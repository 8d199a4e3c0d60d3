from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING

from .artifacts import JsonlFormatError, iter_jsonl
from .config import DEFAULT_PROFILE, ConfigError

if TYPE_CHECKING:
    from importlib.resources.abc import Traversable


@dataclass(frozen=True)
class Exemplar:
    question: str
    entities: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.entities:
            raise ValueError("exemplar entities must be nonempty")


@dataclass(frozen=True)
class PromptProfile:
    name: str
    system_instruction: str
    question: str
    combine_knowledge: str
    got_instruction: str
    exemplars: str
    no_evidence: str
    aggregate: str
    extract_entities: str
    relevance_gate: str
    retrieval: str
    choice_hint: str
    judge_system: str
    extraction_exemplars: tuple[Exemplar, ...]


_TEXT_FIELDS = {
    "system_instruction": "system.txt",
    "question": "question.txt",
    "combine_knowledge": "combine_knowledge.txt",
    "got_instruction": "got_instruction.txt",
    "exemplars": "final_exemplar.txt",
    "no_evidence": "no_evidence.txt",
    "aggregate": "aggregate.txt",
    "extract_entities": "extract_entities.txt",
    "relevance_gate": "relevance_gate.txt",
    "retrieval": "retrieval.txt",
    "choice_hint": "choice_hint.txt",
    "judge_system": "judge_system.txt",
}
_EXEMPLAR_FILE = "exemplars.jsonl"


def load_exemplars(path: Path) -> tuple[Exemplar, ...]:
    exemplars: list[Exemplar] = []
    try:
        for line_number, record in iter_jsonl(path):
            question = record.get("question")
            entities = record.get("entities")
            if not isinstance(question, str) or not isinstance(entities, list) or not entities:
                raise ConfigError(f"{path}:{line_number}: exemplar needs a question and a nonempty entities list")
            exemplars.append(Exemplar(question=question, entities=tuple(str(item) for item in entities)))
    except (OSError, JsonlFormatError) as exc:
        raise ConfigError(f"Cannot load exemplars: {exc}") from exc
    if not exemplars:
        raise ConfigError(f"{path}: no exemplars found")
    return tuple(exemplars)


@functools.lru_cache(maxsize=16)
def load_profile(name_or_path: str = DEFAULT_PROFILE) -> PromptProfile:
    root = _resolve_profile_root(name_or_path)
    texts = {field_name: _read_template(root, filename) for field_name, filename in _TEXT_FIELDS.items()}
    exemplar_file = root.joinpath(_EXEMPLAR_FILE)
    if not exemplar_file.is_file():
        raise ConfigError(f"Missing template file {_EXEMPLAR_FILE} in profile {name_or_path}")
    with resources.as_file(exemplar_file) as exemplar_path:
        exemplars = load_exemplars(Path(exemplar_path))
    return PromptProfile(name=name_or_path, extraction_exemplars=exemplars, **texts)


def _resolve_profile_root(name_or_path: str) -> Traversable:
    candidate = Path(name_or_path).expanduser()
    if candidate.is_dir():
        return candidate
    packaged = resources.files("graphmind").joinpath("profiles").joinpath(name_or_path)
    if packaged.is_dir():
        return packaged
    raise ConfigError(f"Unknown prompt profile {name_or_path!r}")


def _read_template(root: Traversable, filename: str) -> str:
    template = root.joinpath(filename)
    if not template.is_file():
        raise ConfigError(f"Missing template file {filename} in profile {root}")
    return template.read_text(encoding="utf-8").strip("\n")
