import argparse
import json
import logging
import os
import sys

import pandas as pd

from .config import load_config
from .exceptions import MissingFinalAnswer, NoGroupKept, TermharnessError, WorkdirMissing
from .gateway import make_gateway
from .grpo import evaluate_objective
from .judge import judge_runs
from .metrics import build_report, render_markdown
from .models import SubagentQuery
from .orchestrator import (
    PASSTHROUGH_MODES,
    error_to_dict,
    load_manifest,
    load_records,
    summarize_manifest,
)
from .pipeline import read_rewards, run_grade_stage, run_pipeline, run_plan_stage, run_rollout_stage
from .subagent import run_subagent
from .terminal import make_executor
from .tokens import get_counter


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def cmd_subagent(args, config, llm):
    subagent_config = config.subagent
    if args.turn_limit is not None:
        subagent_config = subagent_config.model_copy(update={"turn_limit": args.turn_limit})
    if not os.path.isdir(args.workdir):
        raise WorkdirMissing(
            "\"{}\" is not an existing directory".format(args.workdir), workdir=args.workdir
        )
    term = make_executor(config.sandbox, args.workdir)
    try:
        outcome = run_subagent(
            SubagentQuery(query=args.query, description=args.description or args.query[:80]),
            subagent_config,
            llm,
            term,
            counter=get_counter(config.gateway.token_counter),
        )
    finally:
        term.close()
    os.makedirs(args.out, exist_ok=True)
    outcome.trajectory.save(os.path.join(args.out, "trajectory.jsonl"))
    with open(os.path.join(args.out, "final_answer.txt"), "w", encoding="utf-8") as f:
        f.write(outcome.response_text)
    _write_json(
        os.path.join(args.out, "commands.json"),
        [{"command": c.to_dict(), "result": r.to_dict()} for c, r in outcome.commands],
    )
    if not outcome.final_answer.well_formed:
        raise MissingFinalAnswer(
            "The subagent did not produce a well-formed final answer",
            turns_used=outcome.turns_used,
            coaxed=outcome.coaxed,
        )
    print(outcome.final_answer.render())


def cmd_rollout(args, config, llm):
    instances, failures = load_manifest(args.manifest)
    records = run_rollout_stage(
        args.out,
        instances,
        failures,
        args.group_size or config.grpo.group_size,
        args.parallelism or config.pool.parallelism,
        config,
        llm,
        args.mode,
        seed=args.seed,
    )
    summary = summarize_manifest(instances)
    summary.update(
        load_failures=len(failures),
        records=len(records),
        failed_rollouts=sum(1 for r in records if r.failed),
        protocol_violations=sum(1 for r in records if r.protocol_violation),
    )
    print(json.dumps(summary, sort_keys=True))


def cmd_plan(args, config, llm):
    records = load_records(args.rollouts)
    plans = run_plan_stage(
        args.rollouts, records, config, llm, args.parallelism or config.pool.parallelism
    )
    print(json.dumps({"records": len(records), "plans": len(plans)}))


def cmd_grade(args, config, llm):
    if args.alpha is not None:
        config = config.model_copy(
            update={"reward": config.reward.model_copy(update={"alpha": args.alpha})}
        )
    parallelism = args.parallelism or config.pool.parallelism
    instances, _ = load_manifest(args.manifest, check_patches=False)
    records = load_records(args.rollouts)
    plans = run_plan_stage(args.rollouts, records, config, llm, parallelism)
    rewards = run_grade_stage(
        args.rollouts, records, instances, plans, config, llm, parallelism, out=args.out
    )
    print(json.dumps({"rows": len(rewards), "kept_rows": int(rewards["kept"].sum())}))


def cmd_grpo_eval(args, config, llm):
    rewards = read_rewards(args.rewards)
    logprobs = pd.read_json(args.logprobs, lines=True, dtype={"instance_id": str})
    result = evaluate_objective(rewards, logprobs, config.grpo)
    _write_json(args.out, result)
    print(json.dumps({"objective": result["objective"], "groups": len(result["groups"])}))


def cmd_judge(args, config, llm):
    n_after = config.evaluation.judge_n_after if args.n_after is None else args.n_after
    rows = judge_runs(
        args.runs,
        llm,
        n_after=n_after,
        model=config.gateway.judge_model,
        excerpt_chars=config.evaluation.system_prompt_excerpt_chars,
    )
    _write_jsonl(args.out, rows)
    print(json.dumps({"calls": len(rows), "errors": sum(1 for r in rows if "error" in r)}))


def cmd_report(args, config, llm):
    model_tags = _read_json(args.model_tags) if args.model_tags else {}
    judge_rows = None
    if args.judge:
        judge_rows = pd.read_json(args.judge, lines=True).to_dict(orient="records")
    report = build_report(
        args.runs,
        model_tags,
        baseline=args.baseline,
        judge_rows=judge_rows,
        strict_adjacency=config.evaluation.strict_adjacency,
    )
    if args.out.endswith(".md"):
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(render_markdown(report))
    else:
        _write_json(args.out, report)
    print(render_markdown(report), end="")


def cmd_pipeline(args, config, llm):
    summary = run_pipeline(
        args.manifest,
        args.out or config.paths.run_dir,
        config,
        llm,
        args.group_size or config.grpo.group_size,
        args.parallelism or config.pool.parallelism,
        args.mode,
        seed=args.seed,
    )
    print(json.dumps(summary, sort_keys=True))
    if not summary["kept_groups"]:
        raise NoGroupKept("No rollout group survived the group filter", **summary)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="termharness",
        description="Execution subagent runtime, rollouts, rewards and evaluation",
    )
    parser.add_argument("--config", help="configuration file (default: termharness.yaml)")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="log level for messages on stderr",
    )
    parser.add_argument("--seed", type=int, help="seed for the live model backend")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("subagent", help="run one subagent session")
    p.add_argument("--query", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--description")
    p.add_argument("--turn-limit", type=int)
    p.add_argument("--out", default=".", help="directory for the session files")
    p.set_defaults(func=cmd_subagent)

    p = sub.add_parser("rollout", help="run G rollouts of every manifest instance")
    _add_batch_arguments(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("plan", help="extract execution plans of recorded rollouts")
    p.add_argument("--rollouts", required=True, help="run directory")
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("grade", help="grade rollouts and write rewards")
    p.add_argument("--rollouts", required=True, help="run directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--out", required=True, help="rewards file (JSONL)")
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("grpo-eval", help="evaluate the GRPO objective on exported data")
    p.add_argument("--rewards", required=True)
    p.add_argument("--logprobs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grpo_eval)

    p = sub.add_parser("judge", help="judge subagent responses of recorded runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--n-after", type=int)
    p.add_argument("--out", required=True, help="judge rows (JSONL)")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("report", help="behavioral metrics of recorded runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--model-tags", help="JSON mapping of model names to frontier or slm")
    p.add_argument("--baseline", help="configuration to report changes against")
    p.add_argument("--judge", help="judge rows to include (JSONL)")
    p.add_argument("--out", required=True, help="report.json or report.md")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="rollout, plan, grade and filter")
    _add_batch_arguments(p)
    p.add_argument("--out", help="run directory (default: paths.run_dir)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _add_batch_arguments(parser):
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--group-size", type=int)
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--mode", choices=PASSTHROUGH_MODES, default="deterministic")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        llm = make_gateway(config.gateway, seed=args.seed)
        args.func(args, config, llm)
    except TermharnessError as e:
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(json.dumps(error_to_dict(e)), file=sys.stderr)
        return 1
    return 0
