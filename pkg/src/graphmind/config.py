from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import yaml


class ConfigError(ValueError):
    pass


LLM_MODE_LIVE = "live"
LLM_MODE_RECORD = "record"
LLM_MODE_REPLAY = "replay"
_VALID_LLM_MODES = {LLM_MODE_LIVE, LLM_MODE_RECORD, LLM_MODE_REPLAY}

GATE_EMBEDDING = "embedding"
GATE_LLM = "llm"
_VALID_GATES = {GATE_EMBEDDING, GATE_LLM}

_VALID_KG_FORMATS = {"triples-csv", "triples-jsonl"}
_SEED_LIMIT = 2**64

DEFAULT_PROFILE = "medical_en"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
API_KEY_ENV = "GRAPHMIND_API_KEY"


@dataclass(frozen=True)
class KGConfig:
    path: Path | None = None
    format: str | None = None


@dataclass(frozen=True)
class ExplorationConfig:
    k: int = 3
    tau: float = 0.6
    n_max: int = 5
    seed: int = 42
    relevance_gate: str = GATE_EMBEDDING


@dataclass(frozen=True)
class LinkingConfig:
    min_similarity: float = 0.0


@dataclass(frozen=True)
class PromptConfig:
    profile: str = DEFAULT_PROFILE
    combine_knowledge: bool = True
    choice_question: bool = False


@dataclass(frozen=True)
class LLMConfig:
    endpoint: str = DEFAULT_ENDPOINT
    model_id: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_output_tokens: int | None = None
    mode: str = LLM_MODE_LIVE
    transcript: Path | None = None
    timeout_seconds: float = 60.0
    max_retries: int = 4
    backoff_base_seconds: float = 0.5
    backoff_cap_seconds: float = 8.0
    max_in_flight: int = 4


@dataclass(frozen=True)
class BaselineConfig:
    corpus: Path | None = None
    top_k: int = 3
    bm25_k1: float = 1.5
    bm25_b: float = 0.75


@dataclass(frozen=True)
class RunSettings:
    output_dir: Path = Path("./out")
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    kg: KGConfig = field(default_factory=KGConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    linking: LinkingConfig = field(default_factory=LinkingConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    run: RunSettings = field(default_factory=RunSettings)


_SECTIONS = ("kg", "exploration", "linking", "prompts", "llm", "baselines", "run")


def _section(raw: dict[str, Any], key: str) -> dict[str, Any]:
    value = raw.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be a mapping")
    return value


def _int(raw: dict[str, Any], key: str, parent: str, default: int | None) -> int | None:
    value = raw.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool):
        raise ConfigError(f"{parent}.{key} must be an integer")
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{parent}.{key} must be an integer") from exc


def _float(raw: dict[str, Any], key: str, parent: str, default: float) -> float:
    value = raw.get(key, default)
    if isinstance(value, bool):
        raise ConfigError(f"{parent}.{key} must be a number")
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{parent}.{key} must be a number") from exc


def _optional_path(raw: dict[str, Any], key: str) -> Path | None:
    value = raw.get(key)
    return Path(str(value)).expanduser() if value else None


def _parse_kg(raw: dict[str, Any]) -> KGConfig:
    fmt = raw.get("format")
    if fmt is not None:
        fmt = str(fmt)
        if fmt in {"csv", "jsonl"}:
            fmt = f"triples-{fmt}"
        if fmt not in _VALID_KG_FORMATS:
            raise ConfigError("kg.format must be one of triples-csv, triples-jsonl")
    return KGConfig(path=_optional_path(raw, "path"), format=fmt)


def _parse_exploration(raw: dict[str, Any]) -> ExplorationConfig:
    defaults = ExplorationConfig()
    k = _int(raw, "k", "exploration", defaults.k)
    if k is None or k < 1:
        raise ConfigError("exploration.k must be >= 1")
    n_max = _int(raw, "n_max", "exploration", defaults.n_max)
    if n_max is None or n_max < 1:
        raise ConfigError("exploration.n_max must be >= 1")
    seed = _int(raw, "seed", "exploration", defaults.seed)
    if seed is None or not 0 <= seed < _SEED_LIMIT:
        raise ConfigError("exploration.seed must be a 64-bit unsigned integer")
    gate = str(raw.get("relevance_gate") or defaults.relevance_gate).strip().lower()
    if gate not in _VALID_GATES:
        raise ConfigError(f"exploration.relevance_gate must be one of {', '.join(sorted(_VALID_GATES))}")
    return ExplorationConfig(
        k=k,
        tau=_float(raw, "tau", "exploration", defaults.tau),
        n_max=n_max,
        seed=seed,
        relevance_gate=gate,
    )


def _parse_linking(raw: dict[str, Any]) -> LinkingConfig:
    min_similarity = _float(raw, "min_similarity", "linking", 0.0)
    if not -1.0 <= min_similarity <= 1.0:
        raise ConfigError("linking.min_similarity must be within [-1, 1]")
    return LinkingConfig(min_similarity=min_similarity)


def _parse_prompts(raw: dict[str, Any]) -> PromptConfig:
    return PromptConfig(
        profile=str(raw.get("profile") or DEFAULT_PROFILE),
        combine_knowledge=bool(raw.get("combine_knowledge", True)),
        choice_question=bool(raw.get("choice_question", False)),
    )


def _parse_llm(raw: dict[str, Any]) -> LLMConfig:
    defaults = LLMConfig()
    mode = str(raw.get("mode") or defaults.mode).strip().lower()
    if mode not in _VALID_LLM_MODES:
        raise ConfigError(f"llm.mode must be one of {', '.join(sorted(_VALID_LLM_MODES))}")
    transcript = _optional_path(raw, "transcript")
    if mode != LLM_MODE_LIVE and transcript is None:
        raise ConfigError(f"llm.transcript is required when llm.mode={mode}")

    temperature = _float(raw, "temperature", "llm", defaults.temperature)
    if temperature < 0:
        raise ConfigError("llm.temperature must be >= 0")
    max_output_tokens = _int(raw, "max_output_tokens", "llm", None)
    if max_output_tokens is not None and max_output_tokens < 1:
        raise ConfigError("llm.max_output_tokens must be >= 1")
    max_retries = _int(raw, "max_retries", "llm", defaults.max_retries)
    if max_retries is None or max_retries < 0:
        raise ConfigError("llm.max_retries must be >= 0")
    max_in_flight = _int(raw, "max_in_flight", "llm", defaults.max_in_flight)
    if max_in_flight is None or max_in_flight < 1:
        raise ConfigError("llm.max_in_flight must be >= 1")

    return LLMConfig(
        endpoint=str(raw.get("endpoint") or defaults.endpoint),
        model_id=str(raw.get("model_id") or defaults.model_id),
        temperature=temperature,
        max_output_tokens=max_output_tokens,
        mode=mode,
        transcript=transcript,
        timeout_seconds=_float(raw, "timeout_seconds", "llm", defaults.timeout_seconds),
        max_retries=max_retries,
        backoff_base_seconds=_float(raw, "backoff_base_seconds", "llm", defaults.backoff_base_seconds),
        backoff_cap_seconds=_float(raw, "backoff_cap_seconds", "llm", defaults.backoff_cap_seconds),
        max_in_flight=max_in_flight,
    )


def _parse_baselines(raw: dict[str, Any]) -> BaselineConfig:
    defaults = BaselineConfig()
    top_k = _int(raw, "top_k", "baselines", defaults.top_k)
    if top_k is None or top_k < 1:
        raise ConfigError("baselines.top_k must be >= 1")
    k1 = _float(raw, "bm25_k1", "baselines", defaults.bm25_k1)
    if k1 <= 0:
        raise ConfigError("baselines.bm25_k1 must be > 0")
    b = _float(raw, "bm25_b", "baselines", defaults.bm25_b)
    if not 0.0 <= b <= 1.0:
        raise ConfigError("baselines.bm25_b must be within [0, 1]")
    return BaselineConfig(corpus=_optional_path(raw, "corpus"), top_k=top_k, bm25_k1=k1, bm25_b=b)


def _parse_run(raw: dict[str, Any]) -> RunSettings:
    workers = _int(raw, "workers", "run", 1)
    if workers is None or workers < 1:
        raise ConfigError("run.workers must be >= 1")
    output_dir = Path(str(raw.get("output_dir") or "./out")).expanduser()
    return RunSettings(output_dir=output_dir, workers=workers)


def parse_config(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("Top-level config must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")
    return RunConfig(
        kg=_parse_kg(_section(raw, "kg")),
        exploration=_parse_exploration(_section(raw, "exploration")),
        linking=_parse_linking(_section(raw, "linking")),
        prompts=_parse_prompts(_section(raw, "prompts")),
        llm=_parse_llm(_section(raw, "llm")),
        baselines=_parse_baselines(_section(raw, "baselines")),
        run=_parse_run(_section(raw, "run")),
    )


def apply_overrides(raw: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` assignments; values are parsed as YAML scalars."""
    merged = {key: dict(value) if isinstance(value, dict) else value for key, value in raw.items()}
    for item in overrides:
        dotted, sep, value = item.partition("=")
        parts = dotted.strip().split(".")
        if not sep or len(parts) != 2 or not all(parts):
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        section, key = parts
        target = merged.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"{section} must be a mapping")
        target[key] = yaml.safe_load(value) if value.strip() else None
    return merged


def load_raw_config(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    config_path = Path(path)
    try:
        with config_path.open("r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"Cannot read config {config_path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"Invalid YAML in {config_path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("Top-level config must be a mapping")
    return raw


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    return parse_config(apply_overrides(load_raw_config(path), overrides))
