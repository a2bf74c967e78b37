import json
import logging
import os
import threading
import time
from dataclasses import dataclass

import httpx
import yaml

from .exceptions import GatewayFailure, ScriptAssertionFailure, ScriptExhausted
from .models import ASSISTANT, TOOL, ChatMessage, ToolCall

logger = logging.getLogger(__name__)

STOP = "stop"
TOOL_CALL = "tool_call"
LENGTH = "length"

_WIRE_FINISH_REASONS = {
    "stop": STOP,
    "tool_calls": TOOL_CALL,
    "function_call": TOOL_CALL,
    "length": LENGTH,
}
_RETRYABLE_STATUS_CODES = {408, 409, 429, 500, 502, 503, 504}


def tool_schema(name, description, properties, required):
    """Return a tool definition in the chat-completions ``tools`` format."""
    return {
        "type": "function",
        "function": {
            "name": name,
            "description": description,
            "parameters": {
                "type": "object",
                "properties": properties,
                "required": list(required),
            },
        },
    }


def tool_names(tools):
    return [tool["function"]["name"] for tool in tools]


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple
    tools: tuple = ()
    model: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 4096
    # Which of a group of samples this request belongs to; never sent on the wire.
    sample_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "tools", tuple(self.tools))
        if not self.messages:
            raise ValueError("A chat request needs at least one message")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @property
    def turn_index(self):
        """The number of assistant turns that precede the requested one."""
        return sum(1 for message in self.messages if message.role == ASSISTANT)


@dataclass(frozen=True)
class ChatResponse:
    message: ChatMessage
    prompt_tokens: int = None
    completion_tokens: int = None
    finish_reason: str = STOP

    def __post_init__(self):
        for count in (self.prompt_tokens, self.completion_tokens):
            if count is not None and count < 0:
                raise ValueError("Token counts must not be negative")


class ChatGateway:
    def complete(self, request):
        raise NotImplementedError


class LiveGateway(ChatGateway):
    """Talks to an OpenAI-compatible chat-completions endpoint.

    Transient failures (connection errors, timeouts, 429 and 5xx responses) are
    retried with exponential backoff; a cap on concurrent requests is shared by all
    sessions that use the same gateway.
    """

    def __init__(
        self,
        base_url,
        api_key=None,
        retries=3,
        backoff_seconds=1.0,
        timeout_seconds=120.0,
        concurrency=8,
        seed=None,
        client=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.retries = retries
        self.backoff_seconds = backoff_seconds
        self.seed = seed
        self.client = client or httpx.Client(timeout=timeout_seconds)
        self._slots = threading.BoundedSemaphore(concurrency)

    def complete(self, request):
        payload = self._payload(request)
        with self._slots:
            body = self._post_with_retries(payload)
        return self._parse_response(body)

    def _payload(self, request):
        payload = {
            "model": request.model,
            "messages": [_message_to_wire(m) for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.tools:
            payload["tools"] = list(request.tools)
        if self.seed is not None:
            payload["seed"] = self.seed + request.sample_index
        return payload

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = "Bearer {}".format(self.api_key)
        return headers

    def _post_with_retries(self, payload):
        url = "{}/chat/completions".format(self.base_url)
        last_error = None
        for attempt in range(self.retries + 1):
            if attempt:
                delay = self.backoff_seconds * 2 ** (attempt - 1)
                logger.warning(
                    "Retrying %s in %.1f s (attempt %d): %s", url, delay, attempt, last_error
                )
                time.sleep(delay)
            try:
                response = self.client.post(url, json=payload, headers=self._headers())
            except httpx.TransportError as e:
                last_error = "{}: {}".format(type(e).__name__, e)
                continue
            if response.status_code in _RETRYABLE_STATUS_CODES:
                last_error = "HTTP {}".format(response.status_code)
                continue
            if response.status_code >= 400:
                raise GatewayFailure(
                    "{} answered HTTP {}".format(url, response.status_code),
                    status_code=response.status_code,
                )
            try:
                return response.json()
            except ValueError:
                raise GatewayFailure("{} did not answer with JSON".format(url))
        raise GatewayFailure(
            "{} unreachable after {} attempts ({})".format(
                url, self.retries + 1, last_error
            ),
            url=url,
        )

    def _parse_response(self, body):
        try:
            choice = body["choices"][0]
            wire_message = choice["message"]
        except (KeyError, IndexError, TypeError):
            raise GatewayFailure("Malformed chat-completions response")
        usage = body.get("usage") or {}
        return ChatResponse(
            message=ChatMessage(
                role=ASSISTANT,
                content=wire_message.get("content") or "",
                tool_calls=tuple(
                    _tool_call_from_wire(x) for x in wire_message.get("tool_calls") or ()
                ),
            ),
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
            finish_reason=_WIRE_FINISH_REASONS.get(choice.get("finish_reason"), STOP),
        )


def _message_to_wire(message):
    result = {"role": message.role, "content": message.content}
    if message.tool_calls:
        result["tool_calls"] = [
            {
                "id": call.id,
                "type": "function",
                "function": {"name": call.name, "arguments": json.dumps(call.arguments)},
            }
            for call in message.tool_calls
        ]
    if message.role == TOOL:
        result["tool_call_id"] = message.tool_call_id
    return result


def _tool_call_from_wire(wire_call):
    function = wire_call.get("function") or {}
    raw_arguments = function.get("arguments") or "{}"
    try:
        arguments = json.loads(raw_arguments)
    except ValueError:
        arguments = None
    if not isinstance(arguments, dict):
        arguments = {"_unparsed": raw_arguments}
    return ToolCall(
        id=wire_call.get("id") or "", name=function.get("name") or "?", arguments=arguments
    )


class ScriptedGateway(ChatGateway):
    """Replays fixture scripts instead of calling a model.

    A fixture is a list of scripts. Each script applies to one model (or to all
    models, if it names none), optionally only to conversations whose first user
    message contains ``match``, and holds one or more variants; the variant used
    for a request is picked by the request's ``sample_index``, so that a group of
    samples can behave differently. A variant is a list of turns, each with an
    optional ``expect`` (assertions on the request) and a ``respond`` (the
    assistant message to return).

    The turn is selected by the number of assistant messages already in the
    request, so the gateway holds no state and can be shared by concurrent
    sessions.
    """

    def __init__(self, scripts):
        self.scripts = [self._normalize_script(script) for script in scripts]

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
        return cls.from_data(data)

    @classmethod
    def from_data(cls, data):
        if isinstance(data, list):
            return cls([{"turns": data}])
        return cls(data.get("scripts", []))

    @staticmethod
    def _normalize_script(script):
        variants = script.get("variants")
        if variants is None:
            variants = [script.get("turns", [])]
        return {
            "model": script.get("model"),
            "match": script.get("match"),
            "variants": variants,
        }

    def complete(self, request):
        turns = self._find_variant(request)
        turn_index = request.turn_index
        if turn_index >= len(turns):
            raise ScriptExhausted(
                "The script for model {!r} has no turn {}".format(
                    request.model, turn_index
                ),
                turn_index=turn_index,
            )
        turn = turns[turn_index]
        self._check_expectations(turn.get("expect") or {}, request, turn_index)
        return self._make_response(turn.get("respond") or {}, turn_index)

    def _find_variant(self, request):
        first_user_message = next(
            (m.content for m in request.messages if m.role == "user"), ""
        )
        for script in self.scripts:
            if script["model"] not in (None, "*", request.model):
                continue
            if script["match"] and script["match"] not in first_user_message:
                continue
            variants = script["variants"]
            return variants[request.sample_index % len(variants)]
        raise ScriptExhausted(
            "No script for model {!r}".format(request.model), turn_index=request.turn_index
        )

    def _check_expectations(self, expect, request, turn_index):
        def fail(message):
            raise ScriptAssertionFailure(
                "Turn {}: {}".format(turn_index, message), turn_index=turn_index
            )

        names = tool_names(request.tools)
        for name in expect.get("tools", ()):
            if name not in names:
                fail("request must contain tool {}".format(name))
        if expect.get("no_tools") and names:
            fail("request must not offer tools, but offers {}".format(", ".join(names)))
        last = request.messages[-1]
        if "last_role" in expect and last.role != expect["last_role"]:
            fail("last message must have role {}, not {}".format(expect["last_role"], last.role))
        if "last_contains" in expect and expect["last_contains"] not in last.content:
            fail("last message must contain {!r}".format(expect["last_contains"]))
        if "contains" in expect and not any(
            expect["contains"] in m.content for m in request.messages
        ):
            fail("some message must contain {!r}".format(expect["contains"]))

    @staticmethod
    def _make_response(respond, turn_index):
        tool_calls = tuple(
            ToolCall(
                id=call.get("id") or "call_{}_{}".format(turn_index, i),
                name=call["name"],
                arguments=dict(call.get("arguments") or {}),
            )
            for i, call in enumerate(respond.get("tool_calls") or ())
        )
        return ChatResponse(
            message=ChatMessage(
                role=ASSISTANT, content=respond.get("content") or "", tool_calls=tool_calls
            ),
            prompt_tokens=respond.get("prompt_tokens"),
            completion_tokens=respond.get("completion_tokens"),
            finish_reason=respond.get("finish_reason", TOOL_CALL if tool_calls else STOP),
        )


def make_gateway(settings, seed=None):
    """Create the gateway that the ``gateway`` settings ask for."""
    if settings.backend == "scripted":
        return ScriptedGateway.from_file(settings.fixture)
    return LiveGateway(
        settings.base_url,
        api_key=os.environ.get("LLM_API_KEY"),
        retries=settings.retries,
        backoff_seconds=settings.backoff_seconds,
        timeout_seconds=settings.request_timeout_seconds,
        concurrency=settings.concurrency,
        seed=seed,
    )
