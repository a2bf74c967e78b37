"""Helpers for talking to grading models that answer with ``name: score`` lines."""

import logging
import re

from .gateway import ChatRequest
from .models import ASSISTANT, SYSTEM, USER, ChatMessage

logger = logging.getLogger(__name__)

_FENCED_BLOCK = re.compile(r"```[a-zA-Z_]*\n(.*?)```", re.DOTALL)
_SCORE_LINE = re.compile(
    r"^\s*(?:[-*]\s*)?\**([A-Za-z_][A-Za-z_ ]*?)\**\s*[:=]\s*(-?\d+(?:\.\d+)?)"
)


def parse_scores(text, dimensions):
    """Return the scores for ``dimensions`` found in ``text``.

    If the text contains fenced blocks, only those are searched. Dimension names
    are matched case-insensitively, with spaces standing for underscores. The
    first value found for a dimension wins.
    """
    blocks = _FENCED_BLOCK.findall(text or "")
    body = "\n".join(blocks) if blocks else (text or "")
    wanted = set(dimensions)
    result = {}
    for line in body.splitlines():
        match = _SCORE_LINE.match(line)
        if not match:
            continue
        name = match.group(1).strip().lower().replace(" ", "_")
        if name in wanted and name not in result:
            result[name] = float(match.group(2))
    return result


def clamp_scores(scores, low, high, what):
    result = {}
    for name, value in scores.items():
        clamped = min(max(value, low), high)
        if clamped != value:
            logger.warning(
                "The %s gave %s a score of %s; clamped to %s", what, name, value, clamped
            )
        result[name] = clamped
    return result


def ask_for_scores(llm, model, system_prompt, user_prompt, dimensions, max_output_tokens):
    """Ask for scores, re-asking once if some dimensions are missing.

    Returns the scores found and the names of the dimensions still missing.
    """
    messages = [
        ChatMessage(role=SYSTEM, content=system_prompt),
        ChatMessage(role=USER, content=user_prompt),
    ]
    scores = {}
    for attempt in range(2):
        response = llm.complete(
            ChatRequest(messages=messages, model=model, max_output_tokens=max_output_tokens)
        )
        for name, value in parse_scores(response.message.content, dimensions).items():
            scores.setdefault(name, value)
        missing = [name for name in dimensions if name not in scores]
        if not missing:
            break
        logger.warning("Scores for %s are missing (attempt %d)", ", ".join(missing), attempt + 1)
        messages = messages + [
            ChatMessage(role=ASSISTANT, content=response.message.content),
            ChatMessage(role=USER, content=reprompt_message(missing)),
        ]
    return scores, missing


def reprompt_message(missing):
    return (
        "Your reply lacks scores for: {}. Reply again with one \"dimension: score\" "
        "line for every dimension.".format(", ".join(missing))
    )
