"""Command line entry point: ``optimize``, ``run``, ``eval`` and ``report``.

Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
failures at run time. Failures also print one JSON line to stderr of the
form ``{"error": "<ErrorClass>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import errors
from .checkpoint import canonical_json, checkpoint_load, checkpoint_save, read_checkpoint
from .config import RunConfig, load_config
from .evaluation import MATCHERS, evaluate
from .reporting import RecordWriter, build_report, read_records, render_text
from .runtime import QuerySample, TraceLog, execute_full, load_pool
from .search import Optimizer, OptimizerRunState
from .topology import PromptConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_line(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)}, ensure_ascii=False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jointprompt", description="Joint prompt optimization for agent graphs.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("optimize", help="run the prompt search")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint", help="checkpoint path (default: <output_dir>/checkpoint.json)")
    p.add_argument("--max-steps", type=int, help="stop after this many rounds/refreshes (resumable)")

    p = sub.add_parser("run", help="execute the graph on one query and print the final output")
    p.add_argument("--config", required=True)
    p.add_argument("--prompts", help="prompt file (mapping, final_prompts.json, or checkpoint)")
    p.add_argument("--query", required=True)
    p.add_argument("--requirement", default="")

    p = sub.add_parser("eval", help="exact-match accuracy on a labeled JSONL set")
    p.add_argument("--config", required=True)
    p.add_argument("--prompts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--matcher", choices=MATCHERS, default="exact")
    p.add_argument("--json", action="store_true", help="print the full report as JSON")

    p = sub.add_parser("report", help="summarize round records")
    p.add_argument("--records", required=True)
    p.add_argument("--json", help="also write the JSON report here")
    p.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def load_prompts(path: str | None, cfg: RunConfig) -> PromptConfig:
    if path is None:
        return cfg.prompts
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise errors.ConfigError(f"prompt file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise errors.ConfigError(f"prompt file {path} is not valid JSON: {exc}") from None
    if isinstance(doc, dict) and "schema_version" in doc:
        doc = read_checkpoint(path)["state"]["prompt_config"]
    elif isinstance(doc, dict) and isinstance(doc.get("prompt_config"), dict):
        doc = doc["prompt_config"]
    if not isinstance(doc, dict) or not all(isinstance(v, str) for v in doc.values()):
        raise errors.InvalidPromptConfig(f"{path} does not hold an agent -> prompt mapping")
    return PromptConfig(doc).validate(cfg.graph)


def cmd_optimize(args) -> int:
    cfg = load_config(args.config)
    if not cfg.pool_path:
        raise errors.ConfigError("optimize needs pool_path in the config")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    gateway = cfg.gateway()

    if args.resume:
        state = checkpoint_load(args.resume)
        gateway.restore_stats(read_checkpoint(args.resume).get("gateway_stats", {}))
    else:
        state = OptimizerRunState.initial(cfg.graph, cfg.prompts, cfg.hyperparams, cfg.seed)
        for stale in ("records.jsonl", "traces.jsonl"):
            (out / stale).unlink(missing_ok=True)
    pool = load_pool(cfg.pool_path, limit=state.hyperparams.pool_cap)
    started = time.time()

    def save(st):
        checkpoint_save(st, ckpt_path, gateway_stats=gateway.stats(), started_at=started)

    opt = Optimizer(
        state, pool, gateway,
        optimizer_profile=cfg.optimizer_backend,
        eval_profile=cfg.evaluator_backend,
        record_sink=RecordWriter(out / "records.jsonl"),
        trace_log=TraceLog(out / "traces.jsonl"),
        on_step=save,
        template_dir=cfg.template_dir,
    )
    opt.run(max_steps=args.max_steps)
    save(opt.state)
    (out / "final_prompts.json").write_text(canonical_json(opt.state.prompt_config.to_dict()), encoding="utf-8")
    status = "finished" if opt.state.finished else "paused"
    print(json.dumps({"status": status, "checkpoint": str(ckpt_path),
                      "prompts": str(out / "final_prompts.json"),
                      "backend_calls": gateway.total_backend_calls()}))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    prompts = load_prompts(args.prompts, cfg)
    sample = QuerySample("cli", args.query, args.requirement)
    trace = execute_full(cfg.graph, prompts, sample, cfg.gateway())
    print(trace.final_output)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    prompts = load_prompts(args.prompts, cfg)
    samples = load_pool(args.dataset)
    report = evaluate(cfg.graph, prompts, samples, args.matcher, cfg.gateway(), workers=cfg.hyperparams.workers)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(f"accuracy: {report.accuracy:g}")
        print(f"correct: {report.correct}/{report.total}  unanswered: {report.unanswered}")
    return 0


def cmd_report(args) -> int:
    report = build_report(read_records(args.records))
    if args.json:
        Path(args.json).write_text(canonical_json(report), encoding="utf-8")
    if args.format == "json":
        print(json.dumps(report, sort_keys=True))
    else:
        sys.stdout.write(render_text(report))
    return 0


COMMANDS = {"optimize": cmd_optimize, "run": cmd_run, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(_error_line(exc), file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except errors.ConfigError as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except (errors.JointPromptError, OSError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
