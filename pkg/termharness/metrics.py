import glob
import json
import logging
import os
import re
from dataclasses import asdict, dataclass

import pandas as pd

from .models import Trajectory
from .orchestrator import EXECUTION_SUBAGENT, TERMINAL
from .subagent import TERMINAL_TOOL, SubagentOutcome

logger = logging.getLogger(__name__)

TERMINAL_NAMES = frozenset((TERMINAL, TERMINAL_TOOL))
FRONTIER = "frontier"

TOKEN_COLUMNS = ("main_agent_tokens", "subagent_tokens", "frontier_tokens", "slm_tokens")
CALL_COLUMNS = (
    "main_terminal_calls",
    "subagent_calls",
    "subagent_to_terminal",
    "subagent_to_subagent",
)
CHANGE_COLUMNS = TOKEN_COLUMNS + ("main_terminal_calls",)


@dataclass(frozen=True)
class MetricsReport:
    """Behavioral metrics of one instance, or their aggregate over a configuration.

    Aggregates hold means over instances; ``final_answer_rate`` is pooled over
    all subagent calls and is None when there were none.
    """

    instance_id: str = None
    n_instances: int = 1
    main_agent_tokens: int = 0
    subagent_tokens: int = 0
    frontier_tokens: int = 0
    slm_tokens: int = 0
    main_terminal_calls: float = 0
    subagent_calls: float = 0
    subagent_to_terminal: float = 0
    subagent_to_subagent: float = 0
    subagent_responses: int = 0
    final_answers: int = 0
    final_answer_rate: float = None
    subagent_call_rate: float = 0.0
    resolution_rate: float = None

    def to_dict(self):
        return asdict(self)


def tool_sequence(trajectory):
    """Return (assistant turn number, tool name) for every tool call, in order."""
    return [
        (turn, call.name)
        for turn, message in enumerate(trajectory.assistant_messages)
        for call in message.tool_calls
    ]


def _transitions(sequence, strict_adjacency):
    for (turn, name), (next_turn, next_name) in zip(sequence, sequence[1:]):
        if name != EXECUTION_SUBAGENT:
            continue
        if strict_adjacency and next_turn != turn + 1:
            continue
        yield next_name


def _is_frontier(model, model_tags):
    return model_tags.get(model, FRONTIER) == FRONTIER


def compute_metrics(
    main_traj, sub_outcomes, model_tags, strict_adjacency=False, instance_id=None, resolved=None
):
    """Compute the behavioral metrics of one instance.

    A subagent call is followed by a Terminal (or another subagent) call when that
    is the next tool call the main agent makes; with ``strict_adjacency`` it must
    also be made in the very next assistant turn.
    """
    model_tags = model_tags or {}
    sequence = tool_sequence(main_traj)
    next_calls = list(_transitions(sequence, strict_adjacency))
    main_tokens = main_traj.total_tokens
    # the main agent always runs on a frontier model
    frontier_tokens = main_tokens
    subagent_tokens = 0
    for outcome in sub_outcomes:
        tokens = outcome.trajectory.total_tokens
        subagent_tokens += tokens
        if _is_frontier(outcome.trajectory.meta.get("model"), model_tags):
            frontier_tokens += tokens
    subagent_calls = sum(1 for _, name in sequence if name == EXECUTION_SUBAGENT)
    final_answers = sum(1 for x in sub_outcomes if x.final_answer.well_formed)
    return MetricsReport(
        instance_id=instance_id or main_traj.meta.get("instance_id"),
        main_agent_tokens=main_tokens,
        subagent_tokens=subagent_tokens,
        frontier_tokens=frontier_tokens,
        slm_tokens=main_tokens + subagent_tokens - frontier_tokens,
        main_terminal_calls=sum(1 for _, name in sequence if name in TERMINAL_NAMES),
        subagent_calls=subagent_calls,
        subagent_to_terminal=sum(1 for name in next_calls if name in TERMINAL_NAMES),
        subagent_to_subagent=sum(1 for name in next_calls if name == EXECUTION_SUBAGENT),
        subagent_responses=len(sub_outcomes),
        final_answers=final_answers,
        final_answer_rate=final_answers / len(sub_outcomes) if sub_outcomes else None,
        subagent_call_rate=1.0 if subagent_calls else 0.0,
        resolution_rate=None if resolved is None else float(bool(resolved)),
    )


def aggregate_metrics(reports):
    reports = list(reports)
    if not reports:
        return MetricsReport(n_instances=0)
    df = pd.DataFrame([r.to_dict() for r in reports])
    responses = int(df["subagent_responses"].sum())
    final_answers = int(df["final_answers"].sum())
    resolution = df["resolution_rate"].dropna()
    return MetricsReport(
        n_instances=len(reports),
        subagent_responses=responses,
        final_answers=final_answers,
        final_answer_rate=final_answers / responses if responses else None,
        subagent_call_rate=float(df["subagent_call_rate"].mean()),
        resolution_rate=float(resolution.mean()) if len(resolution) else None,
        **{c: int(round(df[c].mean())) for c in TOKEN_COLUMNS},
        **{c: float(df[c].mean()) for c in CALL_COLUMNS},
    )


_SUBAGENT_FILE = re.compile(r"subagent-(\d+)\.jsonl$")


def load_instance_run(directory):
    """Load ``main.jsonl`` and the ``subagent-<k>.jsonl`` files of an instance."""
    main_traj = Trajectory.load(os.path.join(directory, "main.jsonl"))
    paths = sorted(
        glob.glob(os.path.join(directory, "subagent-*.jsonl")),
        key=lambda p: int(_SUBAGENT_FILE.search(p).group(1)),
    )
    return main_traj, [SubagentOutcome.from_trajectory(Trajectory.load(p)) for p in paths]


def load_runs(runs_dir, model_tags=None, strict_adjacency=False):
    """Compute per-instance metrics for every configuration under ``runs_dir``."""
    result = {}
    for configuration in sorted(os.listdir(runs_dir)):
        config_dir = os.path.join(runs_dir, configuration)
        if not os.path.isdir(config_dir):
            continue
        resolved = _read_resolved(config_dir)
        reports = []
        for instance_id in sorted(os.listdir(config_dir)):
            instance_dir = os.path.join(config_dir, instance_id)
            if not os.path.exists(os.path.join(instance_dir, "main.jsonl")):
                continue
            main_traj, outcomes = load_instance_run(instance_dir)
            reports.append(
                compute_metrics(
                    main_traj,
                    outcomes,
                    model_tags,
                    strict_adjacency=strict_adjacency,
                    instance_id=instance_id,
                    resolved=resolved.get(instance_id),
                )
            )
        result[configuration] = reports
    return result


def _read_resolved(config_dir):
    path = os.path.join(config_dir, "resolved.json")
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def build_report(runs_dir, model_tags=None, baseline=None, judge_rows=None, strict_adjacency=False):
    per_configuration = load_runs(runs_dir, model_tags, strict_adjacency)
    judge_means = _judge_means(judge_rows or [])
    configurations = {}
    for name, reports in per_configuration.items():
        aggregate = aggregate_metrics(reports).to_dict()
        aggregate.pop("instance_id")
        if name in judge_means:
            aggregate["judge_overall"] = judge_means[name]
        configurations[name] = {
            "aggregate": aggregate,
            "instances": [r.to_dict() for r in reports],
        }
    if baseline is not None:
        if baseline not in configurations:
            raise ValueError("There is no configuration named {}".format(baseline))
        base = configurations[baseline]["aggregate"]
        for entry in configurations.values():
            for column in CHANGE_COLUMNS:
                entry["aggregate"][column + "_change_pct"] = _change_pct(
                    entry["aggregate"][column], base[column]
                )
    return {"baseline": baseline, "configurations": configurations}


def _change_pct(value, base):
    if not base:
        return None
    return (value - base) / base * 100


def _judge_means(rows):
    if not rows:
        return {}
    df = pd.DataFrame(rows)
    if "configuration" not in df.columns or "overall" not in df.columns:
        return {}
    return {k: float(v) for k, v in df.groupby("configuration")["overall"].mean().items()}


REPORT_COLUMNS = (
    ("main_agent_tokens", "Main Tokens"),
    ("subagent_tokens", "Subagent Tokens"),
    ("frontier_tokens", "Frontier Tokens"),
    ("slm_tokens", "SLM Tokens"),
    ("main_terminal_calls", "Terminal Calls"),
    ("subagent_calls", "Sub Calls"),
    ("subagent_to_terminal", "Sub→Terminal"),
    ("subagent_to_subagent", "Sub→Sub"),
    ("final_answer_rate", "Final Answer Rate"),
    ("subagent_call_rate", "Sub Call Rate"),
    ("resolution_rate", "Resolved"),
    ("judge_overall", "Judge"),
)


def render_markdown(report):
    rows = [(name, entry["aggregate"]) for name, entry in report["configurations"].items()]
    columns = [(key, title) for key, title in REPORT_COLUMNS if any(key in a for _, a in rows)]
    lines = [
        "| Configuration | " + " | ".join(title for _, title in columns) + " |",
        "|---|" + "---|" * len(columns),
    ]
    for name, aggregate in rows:
        cells = [_format_cell(aggregate, key) for key, _ in columns]
        lines.append("| {} | {} |".format(name, " | ".join(cells)))
    return "\n".join(lines) + "\n"


def _format_cell(aggregate, key):
    value = aggregate.get(key)
    if value is None:
        return "n/a"
    if isinstance(value, int):
        text = str(value)
    else:
        text = "{:.2f}".format(value)
    change = aggregate.get(key + "_change_pct")
    if change is not None:
        text += " ({:+.1f}%)".format(change)
    return text
