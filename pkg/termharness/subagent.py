"""The Execution Subagent: a small model that runs terminal commands for a caller.

The subagent gets a single tool, ``run_in_terminal``, and may call it once per
turn. It ends its session by answering with a ``<final_answer>`` block that
summarizes each command; the caller only ever sees that summary. When the turn
limit is reached, the subagent is told to stop and show its final answer, and
gets one more turn (without tools) to do so.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from .gateway import ChatRequest, tool_schema
from .models import (
    ASSISTANT,
    SYSTEM,
    TOOL,
    USER,
    ChatMessage,
    FinalAnswer,
    SubagentQuery,
    Trajectory,
    parse_final_answer,
)
from .prompts import load_prompt
from .terminal import SYNC, TerminalCommand, TerminalResult
from .tokens import count_message, get_counter

logger = logging.getLogger(__name__)

TERMINAL_TOOL = "run_in_terminal"
COAX_MESSAGE = "OK, your allotted iterations are finished. Show the <final_answer>."

TERMINAL_TOOL_SCHEMA = tool_schema(
    TERMINAL_TOOL,
    "Execute a shell command",
    {
        "command": {"type": "string", "description": "The shell command to run"},
        "mode": {
            "type": "string",
            "enum": ["sync", "async"],
            "description": "Execution mode; always use sync",
        },
        "timeout": {"type": "integer", "description": "Timeout in milliseconds"},
    },
    required=("command", "mode", "timeout"),
)


class SubagentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    turn_limit: int = Field(10, ge=1)
    model: str = "terminus-4b"
    system_prompt: Optional[str] = None
    max_trajectory_tokens: int = Field(30000, ge=1)
    default_timeout_ms: int = Field(30000, ge=1)
    timeout_ceiling_ms: int = Field(300000, ge=1)
    temperature: float = Field(0.0, ge=0)
    max_output_tokens: int = Field(4096, ge=1)


def render_subagent_system_prompt(config):
    if config.system_prompt is not None:
        return config.system_prompt
    return load_prompt("subagent_system.txt")


@dataclass(frozen=True)
class SubagentOutcome:
    trajectory: Trajectory
    final_answer: FinalAnswer = FinalAnswer()
    commands: tuple = ()
    coaxed: bool = False
    turns_used: int = 0
    protocol_violations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "commands", tuple(self.commands))
        if len(self.commands) > self.turns_used:
            raise ValueError("A subagent cannot run more commands than it has turns")

    @property
    def response_text(self):
        """What the caller of the subagent receives as the tool result."""
        if self.final_answer.well_formed:
            return self.final_answer.render()
        assistant_messages = self.trajectory.assistant_messages
        return assistant_messages[-1].content if assistant_messages else ""

    def to_dict(self):
        return {
            "trajectory": self.trajectory.to_dict(),
            "final_answer": self.final_answer.to_dict(),
            "commands": [
                {"command": cmd.to_dict(), "result": result.to_dict()}
                for cmd, result in self.commands
            ],
            "coaxed": self.coaxed,
            "turns_used": self.turns_used,
            "protocol_violations": self.protocol_violations,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            trajectory=Trajectory.from_dict(d["trajectory"]),
            final_answer=FinalAnswer.from_dict(d["final_answer"]),
            commands=tuple(
                (TerminalCommand.from_dict(x["command"]), TerminalResult.from_dict(x["result"]))
                for x in d.get("commands", ())
            ),
            coaxed=d.get("coaxed", False),
            turns_used=d.get("turns_used", 0),
            protocol_violations=d.get("protocol_violations", 0),
        )

    @classmethod
    def from_trajectory(cls, trajectory):
        """Reconstruct an outcome from a recorded transcript.

        Command results are not part of a transcript, so ``commands`` stays empty.
        """
        assistant_messages = trajectory.assistant_messages
        last_content = assistant_messages[-1].content if assistant_messages else ""
        return cls(
            trajectory=trajectory,
            final_answer=parse_final_answer(last_content),
            coaxed=any(
                m.role == USER and m.content == COAX_MESSAGE for m in trajectory.messages
            ),
            turns_used=len(assistant_messages),
        )


@dataclass
class SubagentSession:
    query: SubagentQuery
    config: SubagentConfig
    llm: object
    term: object
    counter: object = None
    sample_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counter = self.counter or get_counter()
        self.messages = []
        self.commands = []
        self.turns_used = 0
        self.coaxed = False
        self.protocol_violations = 0
        self.token_sources = {"gateway": 0, "counter": 0}

    def run(self):
        self._append(ChatMessage(role=SYSTEM, content=render_subagent_system_prompt(self.config)))
        self._append(ChatMessage(role=USER, content=self.query.query))
        while self.turns_used < self.config.turn_limit:
            message = self._ask(tools=(TERMINAL_TOOL_SCHEMA,))
            if not message.tool_calls:
                break
            self._handle_tool_calls(message.tool_calls)
        else:
            self._coax()
        return self._outcome()

    def _ask(self, tools):
        request = ChatRequest(
            messages=self.messages,
            tools=tools,
            model=self.config.model,
            temperature=self.config.temperature,
            max_output_tokens=self.config.max_output_tokens,
            sample_index=self.sample_index,
        )
        response = self.llm.complete(request)
        self.turns_used += 1
        message = response.message
        if message.tool_calls and not tools:
            logger.warning(
                "The subagent called tools on its final turn; the calls were ignored"
            )
            self.protocol_violations += 1
            message = ChatMessage(role=ASSISTANT, content=message.content)
        return self._append(message, completion_tokens=response.completion_tokens)

    def _coax(self):
        self.coaxed = True
        self._append(ChatMessage(role=USER, content=COAX_MESSAGE))
        self._ask(tools=())

    def _handle_tool_calls(self, tool_calls):
        first, rest = tool_calls[0], tool_calls[1:]
        self._append_tool_message(first.id, self._execute_tool_call(first))
        if rest:
            logger.warning("The subagent made %d tool calls in one turn", len(tool_calls))
        for call in rest:
            self.protocol_violations += 1
            self._append_tool_message(
                call.id,
                "Not executed: only call {} once per turn. Call it again in your next "
                "turn if this command is still needed.".format(TERMINAL_TOOL),
            )

    def _execute_tool_call(self, call):
        if call.name != TERMINAL_TOOL:
            self.protocol_violations += 1
            logger.warning("The subagent called unknown tool %s", call.name)
            return "Not executed: unknown tool {}. The only tool is {}.".format(
                call.name, TERMINAL_TOOL
            )
        command = call.arguments.get("command")
        if not isinstance(command, str) or not command.strip():
            self.protocol_violations += 1
            logger.warning("The subagent called %s without a command", TERMINAL_TOOL)
            return "Not executed: the command argument is missing or empty."
        notes = []
        cmd = self.term.command(
            command,
            mode=SYNC,
            timeout_ms=self._timeout_ms(call.arguments.get("timeout"), notes),
        )
        if call.arguments.get("mode") != SYNC:
            notes.append(
                'mode was {!r}; the command was run with mode="sync".'.format(
                    call.arguments.get("mode")
                )
            )
        for note in notes:
            logger.warning("Corrected %s arguments: %s", TERMINAL_TOOL, note)
        result = self.term.execute(cmd)
        self.commands.append((cmd, result))
        return self._format_result(result, notes)

    def _timeout_ms(self, requested, notes):
        if isinstance(requested, bool) or not isinstance(requested, (int, float)) or (
            requested <= 0
        ):
            notes.append(
                "timeout was missing or invalid; {} ms was used.".format(
                    self.config.default_timeout_ms
                )
            )
            return self.config.default_timeout_ms
        if requested > self.config.timeout_ceiling_ms:
            notes.append(
                "timeout {} ms exceeds the maximum; {} ms was used.".format(
                    int(requested), self.config.timeout_ceiling_ms
                )
            )
            return self.config.timeout_ceiling_ms
        return int(requested)

    @staticmethod
    def _format_result(result, notes):
        lines = ["Note: {}".format(note) for note in notes]
        if result.timed_out:
            lines.append(
                "Timed out after {} ms and was killed (exit code {}).".format(
                    result.duration_ms, result.exit_code
                )
            )
        else:
            lines.append("Exit code: {}".format(result.exit_code))
        lines.append(result.text)
        return "\n".join(lines)

    def _append_tool_message(self, tool_call_id, content):
        self._append(ChatMessage(role=TOOL, content=content, tool_call_id=tool_call_id))

    def _append(self, message, completion_tokens=None):
        if completion_tokens is not None:
            token_count = completion_tokens
            self.token_sources["gateway"] += 1
        else:
            token_count = self._count(message)
            self.token_sources["counter"] += 1
        message = replace(message, token_count=token_count)
        self.messages.append(message)
        return message

    def _count(self, message):
        return count_message(message, self.counter)

    def _outcome(self):
        trajectory = Trajectory(
            messages=self.messages,
            meta={
                **self.meta,
                "role": "subagent",
                "model": self.config.model,
                "description": self.query.description,
                "token_counter": self.counter.name,
                "token_sources": dict(self.token_sources),
            },
        )
        last = trajectory.assistant_messages[-1]
        return SubagentOutcome(
            trajectory=trajectory,
            final_answer=parse_final_answer(last.content),
            commands=self.commands,
            coaxed=self.coaxed,
            turns_used=self.turns_used,
            protocol_violations=self.protocol_violations,
        )


def run_subagent(query, config, llm, term, counter=None, sample_index=0, meta=None):
    """Run one Execution Subagent session and return its outcome.

    The outcome is returned even if the subagent never produced a well-formed
    final answer; gateway failures are raised.
    """
    session = SubagentSession(
        query=query,
        config=config,
        llm=llm,
        term=term,
        counter=counter,
        sample_index=sample_index,
        meta=dict(meta or {}),
    )
    return session.run()
