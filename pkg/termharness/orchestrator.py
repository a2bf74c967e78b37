import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict

from .exceptions import ConfigConflict, ManifestError, PlanParseFailure, TermharnessError
from .gateway import ChatRequest, tool_schema
from .models import ASSISTANT, SYSTEM, TOOL, USER, ChatMessage, SubagentQuery, ToolCall, Trajectory
from .prompts import load_prompt, render_prompt
from .rewards import Reward, plan_from_manifest_value
from .subagent import SubagentOutcome, run_subagent
from .terminal import make_executor
from .tokens import count_message, get_counter
from .workspace import prepare_workspace, remove_workspace, tree_hash

logger = logging.getLogger(__name__)

EXECUTION_SUBAGENT = "ExecutionSubagent"
TERMINAL = "Terminal"
DETERMINISTIC = "deterministic"
LLM = "llm"
PASSTHROUGH_MODES = (DETERMINISTIC, LLM)
PASSTHROUGH_CALL_ID = "call_passthrough"

EXECUTION_SUBAGENT_SCHEMA = tool_schema(
    EXECUTION_SUBAGENT,
    "Delegate an execution task to a subagent that runs terminal commands and "
    "returns a compact summary of each command",
    {
        "query": {
            "type": "string",
            "description": "What to run and what to report, in natural language",
        },
        "description": {
            "type": "string",
            "description": "A short description of the task",
        },
    },
    required=("query", "description"),
)
MAIN_TERMINAL_SCHEMA = tool_schema(
    TERMINAL,
    "Run a shell command and return its output, truncated to 60KB",
    {
        "command": {"type": "string"},
        "mode": {"type": "string", "enum": ["sync", "async"]},
        "timeout": {"type": "integer", "description": "Timeout in milliseconds"},
    },
    required=("command", "mode", "timeout"),
)


@dataclass(frozen=True)
class TaskInstance:
    id: str
    repo_source: str
    query: str
    reference_plan: object
    base_commit: str = ""
    pre_patch: str = ""
    language: str = "unknown"
    description: str = ""

    def __post_init__(self):
        if not str(self.id).strip():
            raise ValueError("A task instance needs an id")
        if not self.query.strip():
            raise ValueError("The query of task instance {} is empty".format(self.id))

    @property
    def subagent_description(self):
        return self.description or self.query.strip().splitlines()[0][:80]

    def to_dict(self):
        return {
            "id": self.id,
            "repo_source": self.repo_source,
            "base_commit": self.base_commit,
            "pre_patch": self.pre_patch,
            "query": self.query,
            "reference_plan": self.reference_plan.to_dict(),
            "language": self.language,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d, base_dir=None):
        repo_source = d["repo_source"]
        if base_dir and not os.path.isabs(repo_source):
            repo_source = os.path.normpath(os.path.join(base_dir, repo_source))
        return cls(
            id=str(d["id"]),
            repo_source=repo_source,
            base_commit=d.get("base_commit") or "",
            pre_patch=d.get("pre_patch") or "",
            query=d["query"],
            reference_plan=plan_from_manifest_value(d["reference_plan"]),
            language=d.get("language") or "unknown",
            description=d.get("description") or "",
        )


def load_manifest(path, check_patches=True):
    """Read a task manifest, one JSON task instance per line.

    Returns the instances that loaded and a list of failures, one per instance
    that did not (bad JSON, missing fields, a pre-patch that does not apply).
    Relative repository sources are relative to the manifest's directory.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    instances, failures, seen = [], [], set()
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ManifestError("Cannot read {}: {}".format(path, e.strerror), path=str(path))
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            instance = _load_instance(line, base_dir, seen)
            if check_patches:
                verify_instance(instance)
        except (ValueError, KeyError, TypeError, TermharnessError) as e:
            failures.append(_load_failure(line, line_number, e))
            logger.error("Manifest line %d rejected: %s", line_number, failures[-1]["message"])
            continue
        seen.add(instance.id)
        instances.append(instance)
    return instances, failures


def _load_instance(line, base_dir, seen):
    data = json.loads(line)
    if not isinstance(data, dict):
        raise ManifestError("A manifest line must be a JSON object")
    try:
        instance = TaskInstance.from_dict(data, base_dir=base_dir)
    except KeyError as e:
        raise ManifestError("Missing field {}".format(e), instance_id=data.get("id"))
    except PlanParseFailure as e:
        raise ManifestError(
            "Unreadable reference plan: {}".format(e.message), instance_id=data.get("id")
        )
    if instance.id in seen:
        raise ManifestError("Duplicate instance id {}".format(instance.id), instance_id=instance.id)
    return instance


def _load_failure(line, line_number, error):
    try:
        instance_id = json.loads(line).get("id")
    except (ValueError, AttributeError):
        instance_id = None
    result = error_to_dict(error)
    result.setdefault("instance_id", instance_id)
    result["line"] = line_number
    return result


def verify_instance(instance):
    """Raise unless the instance's workspace can be prepared."""
    remove_workspace(prepare_workspace(instance))


def summarize_manifest(instances):
    languages = pd.Series([x.language for x in instances], dtype=object)
    return {
        "total": len(instances),
        "by_language": {str(k): int(v) for k, v in languages.value_counts().sort_index().items()},
    }


def error_to_dict(error):
    if isinstance(error, TermharnessError):
        return error.to_dict()
    return {"kind": type(error).__name__, "message": str(error)}


@dataclass(frozen=True)
class RolloutRecord:
    instance_id: str
    group_index: int
    outcome: SubagentOutcome = None
    reward: Reward = None
    wall_clock_ms: int = 0
    main_trajectory: Trajectory = None
    error: dict = None
    protocol_violation: bool = False
    workspace_hash: str = None
    workspace: str = None

    @property
    def failed(self):
        return self.error is not None

    def to_dict(self):
        return {
            "instance_id": self.instance_id,
            "group_index": self.group_index,
            "outcome": self.outcome.to_dict() if self.outcome else None,
            "reward": self.reward.to_dict() if self.reward else None,
            "wall_clock_ms": self.wall_clock_ms,
            "main_trajectory": self.main_trajectory.to_dict() if self.main_trajectory else None,
            "error": self.error,
            "protocol_violation": self.protocol_violation,
            "workspace_hash": self.workspace_hash,
            "workspace": self.workspace,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            instance_id=d["instance_id"],
            group_index=d["group_index"],
            outcome=SubagentOutcome.from_dict(d["outcome"]) if d.get("outcome") else None,
            reward=Reward.from_dict(d["reward"]) if d.get("reward") else None,
            wall_clock_ms=d.get("wall_clock_ms", 0),
            main_trajectory=(
                Trajectory.from_dict(d["main_trajectory"]) if d.get("main_trajectory") else None
            ),
            error=d.get("error"),
            protocol_violation=d.get("protocol_violation", False),
            workspace_hash=d.get("workspace_hash"),
            workspace=d.get("workspace"),
        )


def record_dir(run_dir, instance_id, group_index):
    return os.path.join(run_dir, "rollouts", str(instance_id), str(group_index))


def save_record(record, run_dir):
    """Write a record as ``main.jsonl``, ``subagent.jsonl`` and ``record.json``."""
    directory = record_dir(run_dir, record.instance_id, record.group_index)
    os.makedirs(directory, exist_ok=True)
    data = record.to_dict()
    data.pop("main_trajectory")
    if record.main_trajectory is not None:
        record.main_trajectory.save(os.path.join(directory, "main.jsonl"))
    if record.outcome is not None:
        record.outcome.trajectory.save(os.path.join(directory, "subagent.jsonl"))
        data["outcome"].pop("trajectory")
    with open(os.path.join(directory, "record.json"), "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    return directory


def load_record(directory):
    with open(os.path.join(directory, "record.json"), encoding="utf-8") as f:
        data = json.load(f)
    main_path = os.path.join(directory, "main.jsonl")
    if os.path.exists(main_path):
        data["main_trajectory"] = Trajectory.load(main_path).to_dict()
    if data.get("outcome") is not None:
        data["outcome"]["trajectory"] = Trajectory.load(
            os.path.join(directory, "subagent.jsonl")
        ).to_dict()
    return RolloutRecord.from_dict(data)


def load_records(run_dir):
    """Load all records of a run directory, ordered by instance and group."""
    rollouts_dir = os.path.join(run_dir, "rollouts")
    if not os.path.isdir(rollouts_dir):
        return []
    records = []
    for instance_id in sorted(os.listdir(rollouts_dir)):
        instance_dir = os.path.join(rollouts_dir, instance_id)
        for group in sorted(os.listdir(instance_dir), key=int):
            records.append(load_record(os.path.join(instance_dir, group)))
    return records


def wrap_query(query):
    if not query.strip():
        raise ValueError("The query must not be empty")
    return render_prompt("query_wrapper.txt", query=query)


def passthrough_main_agent(
    instance, config, llm, term, mode=DETERMINISTIC, group_index=0, counter=None
):
    """Forward the instance's query to the Execution Subagent and stop.

    In ``deterministic`` mode the forwarding tool call is made without a model;
    in ``llm`` mode a model is asked to make it, and any deviation from the exact
    query makes the record a protocol violation, without running the subagent.
    """
    if mode not in PASSTHROUGH_MODES:
        raise ValueError('"{}" is not a pass-through mode'.format(mode))
    counter = counter or get_counter(config.gateway.token_counter)
    messages = [
        _counted(ChatMessage(role=SYSTEM, content=load_prompt("passthrough_system.txt")), counter),
        _counted(ChatMessage(role=USER, content=wrap_query(instance.query)), counter),
    ]
    if mode == DETERMINISTIC:
        call = ToolCall(
            id=PASSTHROUGH_CALL_ID,
            name=EXECUTION_SUBAGENT,
            arguments={"query": instance.query, "description": instance.subagent_description},
        )
        messages.append(_counted(ChatMessage(role=ASSISTANT, tool_calls=(call,)), counter))
    else:
        message = _ask_passthrough_model(messages, config, llm, group_index, counter)
        messages.append(message)
        call = _forwarding_call(message, instance)
        if call is None:
            logger.warning(
                "The pass-through model of %s/%d did not forward the exact query",
                instance.id,
                group_index,
            )
            return RolloutRecord(
                instance_id=instance.id,
                group_index=group_index,
                main_trajectory=_main_trajectory(messages, instance, config, counter, mode),
                protocol_violation=True,
            )
    outcome = run_subagent(
        SubagentQuery(
            query=call.arguments["query"],
            description=call.arguments.get("description") or instance.subagent_description,
        ),
        config.subagent,
        llm,
        term,
        counter=counter,
        sample_index=group_index,
        meta={"instance_id": instance.id, "group_index": group_index},
    )
    messages.append(
        _counted(
            ChatMessage(role=TOOL, content=outcome.response_text, tool_call_id=call.id), counter
        )
    )
    return RolloutRecord(
        instance_id=instance.id,
        group_index=group_index,
        outcome=outcome,
        main_trajectory=_main_trajectory(messages, instance, config, counter, mode),
    )


def _counted(message, counter):
    return replace(message, token_count=count_message(message, counter))


def _ask_passthrough_model(messages, config, llm, group_index, counter):
    response = llm.complete(
        ChatRequest(
            messages=messages,
            tools=(EXECUTION_SUBAGENT_SCHEMA,),
            model=config.gateway.main_model,
            temperature=config.gateway.temperature,
            max_output_tokens=config.gateway.max_output_tokens,
            sample_index=group_index,
        )
    )
    message = response.message
    if response.completion_tokens is not None:
        return replace(message, token_count=response.completion_tokens)
    return _counted(message, counter)


def _forwarding_call(message, instance):
    if len(message.tool_calls) != 1:
        return None
    call = message.tool_calls[0]
    if call.name != EXECUTION_SUBAGENT or call.arguments.get("query") != instance.query:
        return None
    return call


def _main_trajectory(messages, instance, config, counter, mode):
    return Trajectory(
        messages=messages,
        meta={
            "instance_id": instance.id,
            "role": "main",
            "model": config.gateway.main_model if mode == LLM else "passthrough",
            "token_counter": counter.name,
        },
    )


def run_rollout(instance, group_index, config, llm, mode=DETERMINISTIC, counter=None):
    """Run one rollout in a fresh workspace; errors end up in the record."""
    started = time.monotonic()
    workdir = None
    try:
        workdir = prepare_workspace(instance)
        workspace_hash = tree_hash(workdir)
        term = make_executor(config.sandbox, workdir)
        try:
            record = passthrough_main_agent(
                instance, config, llm, term, mode=mode, group_index=group_index, counter=counter
            )
        finally:
            term.close()
        record = replace(record, workspace_hash=workspace_hash, workspace=workdir)
    except Exception as e:
        logger.error("Rollout %s/%d failed: %s", instance.id, group_index, e)
        record = RolloutRecord(
            instance_id=instance.id,
            group_index=group_index,
            error=error_to_dict(e),
            workspace=workdir,
        )
    finally:
        if workdir is not None:
            remove_workspace(workdir)
    return replace(record, wall_clock_ms=int((time.monotonic() - started) * 1000))


class LocalRolloutPool:
    """Runs rollouts in threads of the current process."""

    def __init__(self, parallelism):
        self.parallelism = parallelism

    def run(self, jobs, config, llm, mode, seed=None):
        with ThreadPoolExecutor(max_workers=self.parallelism) as executor:
            return list(
                executor.map(
                    lambda job: run_rollout(job[0], job[1], config, llm, mode), jobs
                )
            )


class CeleryRolloutPool:
    """Runs rollouts as Celery tasks, at most ``parallelism`` at a time.

    Workers build their own gateway from the configuration, so the ``llm``
    given to ``run()`` is not used.
    """

    def __init__(self, parallelism):
        self.parallelism = parallelism

    def run(self, jobs, config, llm, mode, seed=None):
        from .tasks import execute_rollout

        settings = config.model_dump(mode="json")
        records = []
        for start in range(0, len(jobs), self.parallelism):
            results = [
                execute_rollout.apply_async(
                    args=[instance.to_dict(), group_index, settings, mode, seed]
                )
                for instance, group_index in jobs[start : start + self.parallelism]
            ]
            records.extend(RolloutRecord.from_dict(result.get()) for result in results)
        return records


def make_pool(pool_settings, parallelism=None):
    parallelism = parallelism or pool_settings.parallelism
    if pool_settings.backend == "celery":
        from .celery import configure

        configure(pool_settings)
        return CeleryRolloutPool(parallelism)
    return LocalRolloutPool(parallelism)


def run_rollout_batch(
    instances, G, parallelism, config, llm, mode=DETERMINISTIC, pool=None, seed=None
):
    """Run G rollouts of every instance; records come back in instance, group order."""
    if G < 1 or parallelism < 1:
        raise ValueError("The group size and the parallelism must be positive")
    jobs = [(instance, g) for instance in instances for g in range(G)]
    pool = pool or LocalRolloutPool(parallelism)
    logger.info(
        "Running %d rollouts (%d instances, G=%d), %d at a time",
        len(jobs),
        len(instances),
        G,
        parallelism,
    )
    return pool.run(jobs, config, llm, mode, seed=seed)


TOOL_PRESETS = {
    "terminal_only": (False, True),
    "subagent_terminal": (True, True),
    "subagent_only": (True, False),
}


class MainAgentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    use_subagent: bool = True
    use_terminal: bool = True
    system_prompt: str = ""
    preset: Optional[str] = None

    @classmethod
    def from_preset(cls, name, system_prompt=""):
        try:
            use_subagent, use_terminal = TOOL_PRESETS[name]
        except KeyError:
            raise ConfigConflict(
                '"{}" is not a tool configuration; use one of {}'.format(
                    name, ", ".join(TOOL_PRESETS)
                )
            )
        return cls(
            use_subagent=use_subagent,
            use_terminal=use_terminal,
            system_prompt=system_prompt,
            preset=name,
        )


@dataclass(frozen=True)
class ToolRegistration:
    tools: tuple = ()
    system_prompt: str = ""

    @property
    def tool_names(self):
        return [tool["function"]["name"] for tool in self.tools]


def register_subagent_tool(main_config):
    """Return the main agent's tools and system prompt for a tool configuration."""
    if not main_config.use_subagent and not main_config.use_terminal:
        raise ConfigConflict("At least one of the subagent and the Terminal tool is needed")
    tools = []
    system_prompt = main_config.system_prompt
    if main_config.use_subagent:
        tools.append(EXECUTION_SUBAGENT_SCHEMA)
        augmentation = load_prompt("main_augmentation.txt")
        system_prompt = (
            "{}\n\n{}".format(system_prompt.rstrip("\n"), augmentation)
            if system_prompt
            else augmentation
        )
    if main_config.use_terminal:
        tools.append(MAIN_TERMINAL_SCHEMA)
    return ToolRegistration(tools=tuple(tools), system_prompt=system_prompt)
