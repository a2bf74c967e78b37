import json
import re
from dataclasses import dataclass, field, replace

SYSTEM = "system"
USER = "user"
ASSISTANT = "assistant"
TOOL = "tool"
ROLES = (SYSTEM, USER, ASSISTANT, TOOL)

FINAL_ANSWER_OPEN = "<final_answer>"
FINAL_ANSWER_CLOSE = "</final_answer>"


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ValueError("A tool call must have a name")

    def to_dict(self):
        return {"id": self.id, "name": self.name, "arguments": dict(self.arguments)}

    @classmethod
    def from_dict(cls, d):
        return cls(id=d["id"], name=d["name"], arguments=dict(d.get("arguments") or {}))


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str = ""
    tool_calls: tuple = ()
    tool_call_id: str = None
    token_count: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError('"{}" is not a valid message role'.format(self.role))
        if self.tool_calls and self.role != ASSISTANT:
            raise ValueError("Only assistant messages can carry tool calls")
        if (self.tool_call_id is not None) != (self.role == TOOL):
            raise ValueError("tool_call_id must be present exactly on tool messages")
        if self.token_count < 0:
            raise ValueError("token_count must not be negative")
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))

    def to_dict(self):
        return {
            "role": self.role,
            "content": self.content,
            "tool_calls": [call.to_dict() for call in self.tool_calls],
            "tool_call_id": self.tool_call_id,
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            role=d["role"],
            content=d.get("content") or "",
            tool_calls=tuple(ToolCall.from_dict(x) for x in d.get("tool_calls") or ()),
            tool_call_id=d.get("tool_call_id"),
            token_count=d.get("token_count", 0),
        )


@dataclass(frozen=True)
class Trajectory:
    messages: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.messages and self.messages[0].role != SYSTEM:
            raise ValueError("The first message of a trajectory must be a system message")

    @property
    def total_tokens(self):
        return sum(message.token_count for message in self.messages)

    @property
    def assistant_messages(self):
        return [m for m in self.messages if m.role == ASSISTANT]

    @property
    def tool_calls(self):
        """All tool calls, in the order the assistant made them."""
        return [call for m in self.assistant_messages for call in m.tool_calls]

    def with_meta(self, **kwargs):
        return replace(self, meta={**self.meta, **kwargs})

    def to_dict(self):
        return {
            "meta": dict(self.meta),
            "messages": [message.to_dict() for message in self.messages],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            messages=tuple(ChatMessage.from_dict(x) for x in d.get("messages", ())),
            meta=dict(d.get("meta") or {}),
        )

    def dumps(self):
        lines = [json.dumps({"meta": self.meta}, ensure_ascii=False)]
        lines.extend(
            json.dumps(message.to_dict(), ensure_ascii=False) for message in self.messages
        )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, s):
        lines = [line for line in s.splitlines() if line.strip()]
        if not lines:
            return cls()
        header = json.loads(lines[0])
        messages = tuple(ChatMessage.from_dict(json.loads(line)) for line in lines[1:])
        return cls(messages=messages, meta=header.get("meta", {}))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())


@dataclass(frozen=True)
class FinalAnswerEntry:
    command: str
    summary: str

    def to_dict(self):
        return {"command": self.command, "summary": self.summary}


@dataclass(frozen=True)
class FinalAnswer:
    entries: tuple = ()
    raw_text: str = ""
    well_formed: bool = False

    def render(self):
        """Return the answer the way the caller of the subagent gets to see it."""
        return "{}\n{}\n{}".format(
            FINAL_ANSWER_OPEN, self.raw_text.strip(), FINAL_ANSWER_CLOSE
        )

    def to_dict(self):
        return {
            "entries": [entry.to_dict() for entry in self.entries],
            "raw_text": self.raw_text,
            "well_formed": self.well_formed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            entries=tuple(FinalAnswerEntry(**x) for x in d.get("entries", ())),
            raw_text=d.get("raw_text", ""),
            well_formed=d.get("well_formed", False),
        )


@dataclass(frozen=True)
class SubagentQuery:
    query: str
    description: str

    def __post_init__(self):
        if not self.query.strip() or not self.description.strip():
            raise ValueError("Both the query and the description must be non-empty")


_COMMAND_LINE = re.compile(r"^\s*Command:\s?(.*)$")
_SUMMARY_LINE = re.compile(r"^\s*Summary:\s?(.*)$")


def parse_final_answer(text):
    text = text or ""
    if text.count(FINAL_ANSWER_OPEN) != 1 or text.count(FINAL_ANSWER_CLOSE) != 1:
        return FinalAnswer()
    start = text.index(FINAL_ANSWER_OPEN) + len(FINAL_ANSWER_OPEN)
    end = text.index(FINAL_ANSWER_CLOSE)
    if end < start:
        return FinalAnswer()
    raw_text = text[start:end]
    return FinalAnswer(
        entries=tuple(_parse_entries(raw_text)), raw_text=raw_text, well_formed=True
    )


def _parse_entries(body):
    entries = []
    command = None
    summary_lines = None
    for line in body.splitlines():
        command_match = _COMMAND_LINE.match(line)
        if command_match:
            if summary_lines is not None:
                entries.append(_make_entry(command, summary_lines))
            command, summary_lines = command_match.group(1).strip(), None
            continue
        if command is None:
            continue
        if summary_lines is None:
            summary_match = _SUMMARY_LINE.match(line)
            if summary_match:
                summary_lines = [summary_match.group(1).strip()]
            elif line.strip():
                # A command line must be followed by its summary line
                command = None
            continue
        summary_lines.append(line.strip())
    if command is not None and summary_lines is not None:
        entries.append(_make_entry(command, summary_lines))
    return entries


def _make_entry(command, summary_lines):
    return FinalAnswerEntry(command=command, summary="\n".join(summary_lines).strip())
