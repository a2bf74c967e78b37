import logging
import re
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import GradeParseFailure, PlanParseFailure
from .gateway import ChatRequest
from .models import ASSISTANT, SYSTEM, USER, ChatMessage
from .prompts import load_prompt, render_prompt
from .scoring import ask_for_scores, clamp_scores

logger = logging.getLogger(__name__)

POSITIVE_DIMENSIONS = (
    "command_correctness",
    "error_handling",
    "outcome_accuracy",
    "key_information_extraction",
    "completeness",
    "efficiency",
    "actionability",
)
PITFALL_DIMENSIONS = (
    "hallucinated_results",
    "missed_errors",
    "wrong_diagnosis",
    "unnecessary_commands",
)
FINAL_ANSWER_DIMENSIONS = ("detail_level", "factual_accuracy", "informativeness")
RUBRIC_DIMENSIONS = POSITIVE_DIMENSIONS + PITFALL_DIMENSIONS + FINAL_ANSWER_DIMENSIONS
SCORE_MIN = 0.0
SCORE_MAX = 100.0

OVERLENGTH = "overlength"
MISSING_FINAL_ANSWER = "missing_final_answer"
NO_COMMANDS = "no_commands"

PLAN_OUTPUT_HEAD = 500
PLAN_OUTPUT_TAIL = 500
PLAN_OUTPUT_MARKER = "\n[... middle of output omitted ...]\n"

SUCCESS = "success"
FAILURE = "failure"
PARTIAL = "partial"
OUTCOMES = (SUCCESS, FAILURE, PARTIAL)


class RewardConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(0.5, ge=0, le=1)
    penalty_overlength: float = -100.0
    penalty_missing_final_answer: float = -100.0
    penalty_no_commands: float = -50.0
    max_trajectory_tokens: int = Field(30000, ge=1)
    sigma_min: float = Field(0.01, ge=0)


@dataclass(frozen=True)
class RubricScores:
    positive: dict
    pitfall: dict
    final_answer: dict

    def __post_init__(self):
        for group, dimensions in (
            (self.positive, POSITIVE_DIMENSIONS),
            (self.pitfall, PITFALL_DIMENSIONS),
            (self.final_answer, FINAL_ANSWER_DIMENSIONS),
        ):
            if set(group) != set(dimensions):
                raise ValueError(
                    "Expected scores for {}, got {}".format(
                        ", ".join(dimensions), ", ".join(sorted(group))
                    )
                )
            for name, value in group.items():
                if not SCORE_MIN <= value <= SCORE_MAX:
                    raise ValueError("{} = {} is out of range".format(name, value))

    @property
    def s_pos_mean(self):
        return float(np.mean([self.positive[x] for x in POSITIVE_DIMENSIONS]))

    @property
    def s_pit_mean(self):
        return float(np.mean([self.pitfall[x] for x in PITFALL_DIMENSIONS]))

    @property
    def s_fa_mean(self):
        return float(np.mean([self.final_answer[x] for x in FINAL_ANSWER_DIMENSIONS]))

    @classmethod
    def from_flat(cls, scores):
        return cls(
            positive={x: float(scores[x]) for x in POSITIVE_DIMENSIONS},
            pitfall={x: float(scores[x]) for x in PITFALL_DIMENSIONS},
            final_answer={x: float(scores[x]) for x in FINAL_ANSWER_DIMENSIONS},
        )

    def to_flat(self):
        return {**self.positive, **self.pitfall, **self.final_answer}


@dataclass(frozen=True)
class Reward:
    value: float
    s_pos_mean: float = None
    s_pit_mean: float = None
    s_fa_mean: float = None
    penalty_applied: str = None
    graded: bool = False

    def to_dict(self):
        return {
            "value": self.value,
            "s_pos_mean": self.s_pos_mean,
            "s_pit_mean": self.s_pit_mean,
            "s_fa_mean": self.s_fa_mean,
            "penalty_applied": self.penalty_applied,
            "graded": self.graded,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class PlanCommand:
    command: str
    rationale: str = ""
    result: str = ""
    exit_code: int = None

    def render(self):
        return "- `{}` | Why: {} | Result: {} | Exit Code: {}".format(
            self.command,
            self.rationale,
            self.result,
            "unknown" if self.exit_code is None else self.exit_code,
        )

    def to_dict(self):
        return {
            "command": self.command,
            "rationale": self.rationale,
            "result": self.result,
            "exit_code": self.exit_code,
        }


@dataclass(frozen=True)
class ExecutionPlan:
    task_outcome: str
    outcome_summary: str = ""
    commands_executed: tuple = ()
    key_findings: str = ""
    error_recovery: str = ""
    final_state: str = ""

    def __post_init__(self):
        object.__setattr__(self, "commands_executed", tuple(self.commands_executed))
        if self.task_outcome not in OUTCOMES:
            raise ValueError('"{}" is not a valid task outcome'.format(self.task_outcome))

    def render(self):
        commands = "\n".join(c.render() for c in self.commands_executed) or "(none)"
        return (
            "EXECUTION PLAN\n\n"
            "Task Outcome: {} {}\n\n"
            "Commands Executed:\n{}\n\n"
            "Key Findings: {}\n\n"
            "Error Recovery: {}\n\n"
            "Final State: {}\n"
        ).format(
            self.task_outcome,
            self.outcome_summary,
            commands,
            self.key_findings,
            self.error_recovery,
            self.final_state,
        )

    def to_dict(self):
        return {
            "task_outcome": self.task_outcome,
            "outcome_summary": self.outcome_summary,
            "commands_executed": [c.to_dict() for c in self.commands_executed],
            "key_findings": self.key_findings,
            "error_recovery": self.error_recovery,
            "final_state": self.final_state,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            task_outcome=d["task_outcome"],
            outcome_summary=d.get("outcome_summary", ""),
            commands_executed=tuple(PlanCommand(**c) for c in d.get("commands_executed", ())),
            key_findings=d.get("key_findings", ""),
            error_recovery=d.get("error_recovery", ""),
            final_state=d.get("final_state", ""),
        )


_PLAN_SECTIONS = {
    "task outcome": "task_outcome",
    "commands executed": "commands_executed",
    "key findings": "key_findings",
    "error recovery": "error_recovery",
    "final state": "final_state",
}
_HEADING = re.compile(
    r"^\s*(?:#+\s*)?(?:\d+[.)]\s*)?\**\s*({})\s*\**\s*(?::|$)\s*\**\s*(.*)$".format(
        "|".join(_PLAN_SECTIONS)
    ),
    re.IGNORECASE,
)
_OUTCOME_WORD = re.compile(r"\b(success|failure|partial)\b", re.IGNORECASE)
_LIST_ITEM = re.compile(r"^\s*(?:[-*]|\d+[.)])\s+(.*)$")
_INTEGER = re.compile(r"-?\d+")


def parse_execution_plan(text):
    """Parse a plan written in the execution plan template.

    The five sections may come in any order; all five headings must be present.
    """
    sections = {}
    current = None
    for line in (text or "").splitlines():
        match = _HEADING.match(line)
        if match:
            current = _PLAN_SECTIONS[match.group(1).lower()]
            sections.setdefault(current, [])
            if match.group(2).strip():
                sections[current].append(match.group(2))
        elif current is not None:
            sections[current].append(line)
    missing = [key for key in _PLAN_SECTIONS.values() if key not in sections]
    if missing:
        raise PlanParseFailure(
            "The execution plan lacks the sections {}".format(", ".join(missing)),
            missing=missing,
        )

    def body(key):
        return "\n".join(sections[key]).strip()

    task_outcome, outcome_summary = _parse_outcome(body("task_outcome"))
    return ExecutionPlan(
        task_outcome=task_outcome,
        outcome_summary=outcome_summary,
        commands_executed=tuple(_parse_plan_commands(sections["commands_executed"])),
        key_findings=body("key_findings"),
        error_recovery=body("error_recovery"),
        final_state=body("final_state"),
    )


def _parse_outcome(text):
    match = _OUTCOME_WORD.search(text)
    if not match:
        return PARTIAL, text
    summary = (text[: match.start()] + text[match.end() :]).strip(" .:-\n")
    return match.group(1).lower(), summary


def _parse_plan_commands(lines):
    commands = []
    for line in lines:
        match = _LIST_ITEM.match(line)
        if match:
            commands.append(_parse_plan_command(match.group(1)))
    return commands


def _parse_plan_command(item):
    fields = [x.strip() for x in item.split("|")]
    values = {"rationale": "", "result": "", "exit_code": None}
    for part in fields[1:]:
        label, _, value = part.partition(":")
        label = label.strip().lower()
        if label == "why":
            values["rationale"] = value.strip()
        elif label == "result":
            values["result"] = value.strip()
        elif label == "exit code":
            exit_code = _INTEGER.search(value)
            values["exit_code"] = int(exit_code.group(0)) if exit_code else None
    return PlanCommand(command=fields[0].strip("`"), **values)


def plan_from_manifest_value(value):
    """Accept a reference plan given either as a mapping or as plan text."""
    if isinstance(value, dict):
        return ExecutionPlan.from_dict(value)
    return parse_execution_plan(value)


def truncate_for_plan(text):
    if len(text) <= PLAN_OUTPUT_HEAD + PLAN_OUTPUT_TAIL:
        return text
    return text[:PLAN_OUTPUT_HEAD] + PLAN_OUTPUT_MARKER + text[-PLAN_OUTPUT_TAIL:]


def _task_query(outcome):
    return next(
        (m.content for m in outcome.trajectory.messages if m.role == USER), ""
    )


def _render_commands(commands):
    if not commands:
        return "(no commands were executed)"
    blocks = []
    for i, (cmd, result) in enumerate(commands, start=1):
        exit_code = "{} (timed out)".format(result.exit_code) if result.timed_out else result.exit_code
        blocks.append(
            "### Command {}: `{}`\nExit Code: {}\nOutput:\n{}".format(
                i, cmd.command, exit_code, truncate_for_plan(result.text)
            )
        )
    return "\n\n".join(blocks)


def build_plan_prompt(outcome, query=None):
    """Return the system and user prompts asking for an execution plan."""
    user_prompt = render_prompt(
        "plan_user.txt",
        query=_task_query(outcome) if query is None else query,
        commands=_render_commands(outcome.commands),
        final_answer=outcome.response_text or "(no final answer)",
    )
    return load_prompt("plan_system.txt"), user_prompt


def extract_execution_plan(outcome, llm, model="plan-model", query=None, max_output_tokens=4096):
    system_prompt, user_prompt = build_plan_prompt(outcome, query)
    messages = [
        ChatMessage(role=SYSTEM, content=system_prompt),
        ChatMessage(role=USER, content=user_prompt),
    ]
    for attempt in range(2):
        response = llm.complete(
            ChatRequest(messages=messages, model=model, max_output_tokens=max_output_tokens)
        )
        try:
            return parse_execution_plan(response.message.content)
        except PlanParseFailure as e:
            if attempt:
                raise
            logger.warning("Re-asking for the execution plan: %s", e.message)
            messages = messages + [
                ChatMessage(role=ASSISTANT, content=response.message.content),
                ChatMessage(
                    role=USER,
                    content="Your plan lacks the sections {}. Write the whole plan again, "
                    "with all five sections of the template.".format(
                        ", ".join(e.details["missing"])
                    ),
                ),
            ]


def grade_rubric(
    candidate,
    reference,
    query,
    llm,
    final_answer=None,
    model="grader-model",
    max_output_tokens=4096,
):
    """Grade a candidate plan against a reference plan on all rubric dimensions.

    Failure-mode (pitfall) dimensions are scored so that higher is worse.
    """
    final_answer_section = ""
    if final_answer is not None:
        final_answer_section = "\n## Candidate Final Answer\n{}\n".format(final_answer)
    user_prompt = render_prompt(
        "grader_user.txt",
        query=query,
        reference=reference.render(),
        candidate=candidate.render(),
        final_answer=final_answer_section,
    )
    scores, missing = ask_for_scores(
        llm,
        model,
        load_prompt("grader_system.txt"),
        user_prompt,
        RUBRIC_DIMENSIONS,
        max_output_tokens,
    )
    if missing:
        raise GradeParseFailure(
            "The grader gave no score for {}".format(", ".join(missing)), missing=missing
        )
    return RubricScores.from_flat(clamp_scores(scores, SCORE_MIN, SCORE_MAX, "grader"))


def hard_penalty(outcome, cfg):
    """Return the (name, value) of the first hard penalty that applies, or None."""
    if outcome.trajectory.total_tokens > cfg.max_trajectory_tokens:
        return OVERLENGTH, cfg.penalty_overlength
    if not outcome.final_answer.well_formed:
        return MISSING_FINAL_ANSWER, cfg.penalty_missing_final_answer
    if not outcome.commands:
        return NO_COMMANDS, cfg.penalty_no_commands
    return None


def compute_reward(scores, outcome, cfg):
    penalty = hard_penalty(outcome, cfg)
    if penalty is not None:
        name, value = penalty
        return Reward(value=float(value), penalty_applied=name, graded=False)
    if scores is None:
        raise ValueError("Scores are required when no hard penalty applies")
    s_pos, s_pit, s_fa = scores.s_pos_mean, scores.s_pit_mean, scores.s_fa_mean
    return Reward(
        value=(1 - cfg.alpha) * (s_pos - s_pit) + cfg.alpha * s_fa,
        s_pos_mean=s_pos,
        s_pit_mean=s_pit,
        s_fa_mean=s_fa,
        graded=True,
    )


def failed_rollout_reward(cfg):
    return Reward(value=float(cfg.penalty_no_commands), penalty_applied=NO_COMMANDS)


def group_sigma(rewards):
    return float(np.std(np.asarray(rewards, dtype=float)))


def filter_group(rewards, cfg):
    """Whether a group of rewards varies enough to be worth training on."""
    if len(rewards) < 2:
        raise ValueError("A group needs at least two rewards")
    return group_sigma(rewards) >= cfg.sigma_min
