import os

from termharness.config import Config
from termharness.gateway import ChatResponse, ScriptedGateway
from termharness.models import ASSISTANT, ChatMessage, ToolCall

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
MANIFEST = os.path.join(FIXTURES, "manifest.jsonl")
SCRIPTED = os.path.join(FIXTURES, "scripted.yaml")
REPO = os.path.join(FIXTURES, "repo")


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


def scripted_config(**sections):
    data = {"gateway": {"backend": "scripted", "fixture": SCRIPTED}}
    data.update(sections)
    return Config.model_validate(data)


def scripted(*turns):
    """A gateway that plays one script, given as ``respond`` mappings."""
    return ScriptedGateway.from_data([{"respond": turn} for turn in turns])


def terminal_call(command, call_id="call_1", mode="sync", timeout=30000):
    return {
        "id": call_id,
        "name": "run_in_terminal",
        "arguments": {"command": command, "mode": mode, "timeout": timeout},
    }


class RecordingGateway:
    """Returns canned responses in turn and keeps the requests it got."""

    def __init__(self, *contents):
        self.contents = list(contents)
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        content = self.contents[min(len(self.requests), len(self.contents)) - 1]
        return ChatResponse(message=ChatMessage(role=ASSISTANT, content=content))


def assistant(content="", *calls):
    return ChatMessage(
        role=ASSISTANT,
        content=content,
        tool_calls=tuple(ToolCall(id=c[0], name=c[1], arguments=c[2] if len(c) > 2 else {}) for c in calls),
    )
