import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import JudgeParseFailure
from .metrics import load_instance_run
from .models import ASSISTANT, SYSTEM, TOOL, USER
from .orchestrator import EXECUTION_SUBAGENT
from .prompts import load_prompt, render_prompt
from .scoring import ask_for_scores, clamp_scores

logger = logging.getLogger(__name__)

JUDGE_DIMENSIONS = (
    "task_completion",
    "factual_accuracy",
    "informativeness",
    "relevance",
    "actionability",
)
MESSAGE_EXCERPT_CHARS = 1000


@dataclass(frozen=True)
class JudgeScore:
    task_completion: float
    factual_accuracy: float
    informativeness: float
    relevance: float
    actionability: float

    def __post_init__(self):
        for name in JUDGE_DIMENSIONS:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError("{} must be between 0 and 1".format(name))

    @property
    def overall(self):
        return float(np.mean([getattr(self, name) for name in JUDGE_DIMENSIONS]))

    def to_dict(self):
        return {**asdict(self), "overall": self.overall}


@dataclass(frozen=True)
class SubagentCall:
    """One ExecutionSubagent call of a main agent, with what came before and after."""

    index: int
    query: str
    response: str
    context: tuple
    after: tuple

    @property
    def turns_after(self):
        return sum(1 for m in self.after if m.role == ASSISTANT)


def subagent_calls(main_traj, n_after=5):
    messages = main_traj.messages
    calls = []
    for position, message in enumerate(messages):
        for call in message.tool_calls:
            if call.name != EXECUTION_SUBAGENT:
                continue
            response_position, response = _find_response(messages, position, call.id)
            calls.append(
                SubagentCall(
                    index=len(calls),
                    query=call.arguments.get("query", ""),
                    response=response,
                    context=tuple(messages[:position]),
                    after=tuple(_turns_after(messages, response_position + 1, n_after)),
                )
            )
    return calls


def _find_response(messages, position, tool_call_id):
    for i in range(position + 1, len(messages)):
        if messages[i].role == TOOL and messages[i].tool_call_id == tool_call_id:
            return i, messages[i].content
    return position, ""


def _turns_after(messages, start, n_after):
    result = []
    turns = 0
    for message in messages[start:]:
        if message.role == ASSISTANT:
            if turns == n_after:
                break
            turns += 1
        if turns:
            result.append(message)
    return result


def _render_messages(messages):
    if not messages:
        return "(none)"
    return "\n".join(_render_message(m) for m in messages)


def _render_message(message):
    text = message.content
    if len(text) > MESSAGE_EXCERPT_CHARS:
        text = text[:MESSAGE_EXCERPT_CHARS] + " [...]"
    calls = "".join(
        "\n  -> {}({})".format(call.name, json.dumps(call.arguments, ensure_ascii=False))
        for call in message.tool_calls
    )
    return "[{}] {}{}".format(message.role, text, calls)


def build_judge_prompt(context, query, response, after, n_after=5, excerpt_chars=2000):
    system_prompt = next((m.content for m in context if m.role == SYSTEM), "")
    problem_statement = next((m.content for m in context if m.role == USER), "")
    turns = min(sum(1 for m in after if m.role == ASSISTANT), n_after)
    user_prompt = render_prompt(
        "judge_user.txt",
        system_prompt=system_prompt[:excerpt_chars],
        problem_statement=problem_statement,
        trajectory=_render_messages([m for m in context if m.role != SYSTEM][1:]),
        subagent_query=query,
        subagent_response=response,
        n=turns,
        trajectory_after=_render_messages(after),
    )
    return load_prompt("judge_system.txt"), user_prompt


def judge_response(
    context,
    query,
    response,
    after,
    llm,
    n_after=5,
    model="judge-model",
    excerpt_chars=2000,
    max_output_tokens=1024,
):
    """Score a subagent response on the five judge dimensions.

    The overall score is computed here as the mean of the dimensions; an overall
    score reported by the judge is ignored.
    """
    system_prompt, user_prompt = build_judge_prompt(
        context, query, response, after, n_after, excerpt_chars
    )
    scores, missing = ask_for_scores(
        llm, model, system_prompt, user_prompt, JUDGE_DIMENSIONS, max_output_tokens
    )
    if missing:
        raise JudgeParseFailure(
            "The judge gave no score for {}".format(", ".join(missing)), missing=missing
        )
    return JudgeScore(**clamp_scores(scores, 0.0, 1.0, "judge"))


def judge_runs(runs_dir, llm, n_after=5, model="judge-model", excerpt_chars=2000):
    """Judge every subagent call of every configuration under ``runs_dir``.

    Returns one row per call; calls the judge could not score are reported with
    an ``error`` instead of scores.
    """
    rows = []
    for configuration in sorted(os.listdir(runs_dir)):
        config_dir = os.path.join(runs_dir, configuration)
        if not os.path.isdir(config_dir):
            continue
        for instance_id in sorted(os.listdir(config_dir)):
            instance_dir = os.path.join(config_dir, instance_id)
            if not os.path.exists(os.path.join(instance_dir, "main.jsonl")):
                continue
            main_traj, _ = load_instance_run(instance_dir)
            for call in subagent_calls(main_traj, n_after):
                row = {
                    "configuration": configuration,
                    "instance_id": instance_id,
                    "call_index": call.index,
                    "turns_after": min(call.turns_after, n_after),
                }
                try:
                    score = judge_response(
                        call.context,
                        call.query,
                        call.response,
                        call.after,
                        llm,
                        n_after=n_after,
                        model=model,
                        excerpt_chars=excerpt_chars,
                    )
                except JudgeParseFailure as e:
                    logger.error("Could not judge %s/%s call %d", configuration, instance_id, call.index)
                    row["error"] = e.to_dict()
                else:
                    row.update(score.to_dict())
                rows.append(row)
    return rows
