from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator


class JsonlFormatError(ValueError):
    def __init__(self, path: Path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def dumps_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_text_atomic(target: Path, text: str) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    tmp.replace(target)


def write_json_atomic(target: Path, payload: Any) -> None:
    write_text_atomic(target, dumps_json(payload))


def write_jsonl_atomic(target: Path, rows: Iterable[dict[str, Any]]) -> None:
    lines = [json.dumps(row, sort_keys=True, ensure_ascii=False) for row in rows]
    write_text_atomic(target, "".join(f"{line}\n" for line in lines))


def iter_jsonl(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlFormatError(path, line_number, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise JsonlFormatError(path, line_number, "expected a JSON object")
            yield line_number, record


class RunStore:
    def __init__(self, output_dir: Path):
        self.output_dir = output_dir
        self.answers_dir = output_dir / "answers"

    def bootstrap(self) -> None:
        self.answers_dir.mkdir(parents=True, exist_ok=True)

    def manifest_path(self, method: str) -> Path:
        return self.output_dir / f"manifest-{method}.jsonl"

    def answer_path(self, question_id: str, suffix: str = ".json") -> Path:
        return self.answers_dir / f"{_safe_stem(question_id)}{suffix}"

    def save_answer(self, question_id: str, payload: dict[str, Any], dot: str | None = None) -> Path:
        target = self.answer_path(question_id)
        write_json_atomic(target, payload)
        if dot is not None:
            write_text_atomic(self.answer_path(question_id, ".dot"), dot)
        return target

    def save_manifest(self, method: str, rows: Iterable[dict[str, Any]]) -> Path:
        target = self.manifest_path(method)
        write_jsonl_atomic(target, rows)
        return target


def _safe_stem(value: str) -> str:
    # Distinct ids never share a stem, even when they clean to the same text.
    cleaned = "".join(char if char.isalnum() or char in "-_." else "_" for char in value)
    digest = hashlib.sha256(value.encode("utf-8")).hexdigest()[:8]
    return f"{cleaned.strip('.') or 'question'}-{digest}"
