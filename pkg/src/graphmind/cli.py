from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable

from .aggregator import AggregationError
from .artifacts import dumps_json, write_json_atomic, write_text_atomic
from .baselines import CorpusError
from .config import ConfigError, RunConfig, load_config
from .evalkit import RankingParseError, VerdictParseError, resolve_axis, write_rank_csv, write_winrate_csv
from .kg_store import GraphContractError, GraphLoadError, KnowledgeGraph, dump_csv, infer_format, load_graph_file
from .linking import ExtractionError
from .llm_client import CompletionParams, LLMClient, LLMError, TranscriptError, build_client
from .reasoner import AnswerParseError, PipelineError, answer_question, answer_to_dict, emit_dot
from .runner import METHODS, BatchRunner, ManifestError, load_questions, run_pairwise_eval, run_ranking_eval
from .templates import PromptProfile, load_profile

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_LLM = 4
EXIT_PARSE = 5
EXIT_PIPELINE = 6

_EXIT_CODES: tuple[tuple[tuple[type[BaseException], ...], int], ...] = (
    ((ConfigError,), EXIT_CONFIG),
    ((AnswerParseError, ExtractionError, AggregationError, VerdictParseError, RankingParseError), EXIT_PARSE),
    ((LLMError,), EXIT_LLM),
    ((GraphLoadError, GraphContractError, ManifestError, CorpusError, TranscriptError, OSError), EXIT_INPUT),
)


def exit_code_for(exc: BaseException) -> int | None:
    cause = exc.cause if isinstance(exc, PipelineError) else exc
    for types, code in _EXIT_CODES:
        if isinstance(cause, types):
            return code
    return EXIT_PIPELINE if isinstance(exc, PipelineError) else None


def _format_choice(value: str) -> str:
    return value if value.startswith("triples-") else f"triples-{value}"


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Path to YAML config")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a config key; may be repeated",
    )


def _build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphmind",
        description="Answer questions over a knowledge graph with evidence-grounded mind maps",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    build_kg = commands.add_parser("build-kg", help="Load, validate and canonicalize a triple file")
    build_kg.add_argument("--input", required=True, type=Path, help="CSV or JSONL triple file")
    build_kg.add_argument("--format", choices=("csv", "jsonl", "triples-csv", "triples-jsonl"))
    build_kg.add_argument("--out", type=Path, help="Write the canonical sorted CSV here")
    build_kg.add_argument(
        "--allow-rejects",
        action="store_true",
        help="Exit 0 even when malformed records were skipped",
    )
    build_kg.set_defaults(handler=_cmd_build_kg)

    answer = commands.add_parser("answer", help="Answer one question and emit its mind map")
    answer.add_argument("--kg", type=Path, help="Triple file (overrides kg.path)")
    answer.add_argument("--question", required=True)
    answer.add_argument("--emit-dot", type=Path, help="Write the mind map as DOT")
    answer.add_argument("--out", type=Path, help="Write the JSON answer here instead of stdout")
    answer.add_argument("--no-p1", action="store_true", help="Drop the combine-knowledge preamble")
    answer.add_argument("--choice-question", action="store_true", help="Append the multiple-choice hint")
    _add_config_args(answer)
    answer.set_defaults(handler=_cmd_answer)

    batch = commands.add_parser("batch", help="Run one method over a JSONL question file")
    batch.add_argument("--kg", type=Path, help="Triple file (overrides kg.path)")
    batch.add_argument("--questions", required=True, type=Path, help='JSONL rows {"id","question","reference"}')
    batch.add_argument("--method", required=True, choices=METHODS)
    batch.add_argument("--out", type=Path, help="Output directory (overrides run.output_dir)")
    batch.add_argument("--no-p1", action="store_true", help="Drop the combine-knowledge preamble")
    batch.add_argument("--choice-question", action="store_true", help="Append the multiple-choice hint")
    _add_config_args(batch)
    batch.set_defaults(handler=_cmd_batch)

    evaluate = commands.add_parser("eval", help="LLM-as-judge evaluation of batch manifests")
    modes = evaluate.add_subparsers(dest="eval_mode", required=True)
    pairwise = modes.add_parser("pairwise", help="Pairwise win/tie/lose rates per axis")
    pairwise.add_argument("--manifests", required=True, nargs=2, type=Path, metavar=("A", "B"))
    pairwise.add_argument("--axes", nargs="+", default=["total_factualness"], help="Axis names")
    pairwise.add_argument("--anti-tie", action="store_true", help="Ask the judge to avoid ties")
    rank = modes.add_parser("rank", help="Mean judge rank per method")
    rank.add_argument("--manifests", required=True, nargs="+", type=Path)
    for mode in (pairwise, rank):
        mode.add_argument("--judge-config", type=Path, help="YAML config whose llm section drives the judge")
        mode.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        mode.add_argument("--seed", type=int, help="Order-shuffling seed (defaults to exploration.seed)")
        mode.add_argument("--out", required=True, type=Path, help="CSV report path")
    pairwise.set_defaults(handler=_cmd_eval_pairwise)
    rank.set_defaults(handler=_cmd_eval_rank)
    return parser


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config, args.overrides)
    if getattr(args, "kg", None) is not None:
        config = dataclasses.replace(config, kg=dataclasses.replace(config.kg, path=args.kg))
    if getattr(args, "no_p1", False) or getattr(args, "choice_question", False):
        prompts = config.prompts
        if args.no_p1:
            prompts = dataclasses.replace(prompts, combine_knowledge=False)
        if args.choice_question:
            prompts = dataclasses.replace(prompts, choice_question=True)
        config = dataclasses.replace(config, prompts=prompts)
    if getattr(args, "command", None) == "batch" and args.out is not None:
        config = dataclasses.replace(config, run=dataclasses.replace(config.run, output_dir=args.out))
    return config


def _load_graph(config: RunConfig) -> KnowledgeGraph:
    if config.kg.path is None:
        raise ConfigError("kg.path is required (or pass --kg)")
    graph = load_graph_file(config.kg.path, config.kg.format)
    if graph.report.rejected:
        logger.warning("Skipped %s malformed KG record(s) in %s", graph.report.rejected, config.kg.path)
    return graph


def _close(llm: LLMClient) -> None:
    closer = getattr(llm, "close", None)
    if callable(closer):
        closer()


def _cmd_build_kg(args: argparse.Namespace) -> int:
    fmt = _format_choice(args.format) if args.format else infer_format(args.input)
    graph = load_graph_file(args.input, fmt)
    report = graph.report
    for error in report.errors:
        logger.error("%s: %s", args.input, error)
    print(report.summary_line())
    if report.rejected and not args.allow_rejects:
        logger.error("Rejected %s record(s); rerun with --allow-rejects to accept the rest", report.rejected)
        return EXIT_INPUT
    if args.out is not None:
        write_text_atomic(args.out, dump_csv(graph))
        logger.info("Wrote canonical KG to %s", args.out)
    return EXIT_OK


def _cmd_answer(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    graph = _load_graph(config)
    llm = build_client(config.llm)
    try:
        result = answer_question(llm, graph, args.question, config)
    finally:
        _close(llm)
    payload = answer_to_dict(result, graph)
    if args.out is not None:
        write_json_atomic(args.out, payload)
        logger.info("Wrote answer to %s", args.out)
    else:
        sys.stdout.write(dumps_json(payload))
    if args.emit_dot is not None:
        write_text_atomic(args.emit_dot, emit_dot(result.answer, result.report))
        logger.info("Wrote mind map to %s", args.emit_dot)
    logger.info("LLM calls=%s", llm.calls)
    return EXIT_OK


def _cmd_batch(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    graph = _load_graph(config)
    questions = load_questions(args.questions)
    llm = build_client(config.llm)
    try:
        runner = BatchRunner(config, graph, llm)
        runner.run(questions, args.method)
    finally:
        _close(llm)
    if runner.failures:
        question_id, first = runner.failures[0]
        logger.error("%s of %s question(s) failed; first was %s", len(runner.failures), len(questions), question_id)
        return exit_code_for(first) or EXIT_PIPELINE
    return EXIT_OK


@dataclasses.dataclass(frozen=True)
class _Judge:
    llm: LLMClient
    params: CompletionParams
    seed: int
    profile: PromptProfile


def _judge(args: argparse.Namespace) -> _Judge:
    config = load_config(args.judge_config, args.overrides)
    seed = args.seed if args.seed is not None else config.exploration.seed
    profile = load_profile(config.prompts.profile)
    return _Judge(build_client(config.llm), CompletionParams.from_config(config.llm), seed, profile)


def _cmd_eval_pairwise(args: argparse.Namespace) -> int:
    try:
        axes = [resolve_axis(name) for item in args.axes for name in item.split(",") if name]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    judge = _judge(args)
    try:
        rows = run_pairwise_eval(
            judge.llm,
            args.manifests[0],
            args.manifests[1],
            axes,
            params=judge.params,
            seed=judge.seed,
            anti_tie=args.anti_tie,
            profile=judge.profile,
        )
    finally:
        _close(judge.llm)
    write_winrate_csv(args.out, rows)
    for row in rows:
        logger.info("axis=%s win=%.2f tie=%.2f lose=%.2f", row.axis, row.win, row.tie, row.lose)
    return EXIT_OK


def _cmd_eval_rank(args: argparse.Namespace) -> int:
    judge = _judge(args)
    try:
        means = run_ranking_eval(
            judge.llm, args.manifests, params=judge.params, seed=judge.seed, profile=judge.profile
        )
    finally:
        _close(judge.llm)
    write_rank_csv(args.out, means)
    for method, value in means:
        logger.info("method=%s mean_rank=%.4f", method, value)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_arg_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="[%(levelname)s] %(asctime)s %(name)s - %(message)s",
    )

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        if isinstance(exc, PipelineError):
            logging.error("Stage %s failed: %s", exc.stage, exc.cause)
        elif code == EXIT_CONFIG:
            logging.error("Config validation failed: %s", exc)
        else:
            logging.error("%s: %s", type(exc).__name__, exc)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
