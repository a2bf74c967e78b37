import functools
import json
import math
import re


class TokenCounter:
    """Counts tokens in text.

    The exact tokenizer of the models behind the gateway is unknown (and differs
    between providers), so every token figure this package reports is relative to
    the counter that produced it; the counter's ``name`` is stored alongside the
    figures.
    """

    name = None

    def count(self, text):
        raise NotImplementedError


class ApproximateCounter(TokenCounter):
    """Whitespace-plus-punctuation approximation of a subword tokenizer.

    Every punctuation character is one token, and each run of word characters is
    one token per started ``chars_per_token`` characters, so that long
    unbroken strings (hashes, base64 blobs) are not counted as a single token.
    """

    name = "approx"
    chars_per_token = 4
    _words = re.compile(r"\w+")
    _punctuation = re.compile(r"[^\w\s]")

    def count(self, text):
        if not text:
            return 0
        word_tokens = sum(
            math.ceil(len(word) / self.chars_per_token)
            for word in self._words.findall(text)
        )
        return word_tokens + len(self._punctuation.findall(text))


class WhitespaceCounter(TokenCounter):
    name = "whitespace"

    def count(self, text):
        return len(text.split()) if text else 0


@functools.lru_cache(maxsize=None)
def _load_tokenizer(tokenizer_name):
    try:
        from transformers import AutoTokenizer
    except ImportError:
        raise ValueError(
            'The "hf" token counter needs the transformers package; install it with '
            "pip install transformers"
        )
    return AutoTokenizer.from_pretrained(tokenizer_name)


class HuggingFaceCounter(TokenCounter):
    """Counts with the tokenizer of a Hugging Face model, e.g. ``hf:Qwen/Qwen3-4B``.

    Tokenizers are loaded once per process and shared.
    """

    kind = "hf"

    def __init__(self, tokenizer_name):
        if not tokenizer_name:
            raise ValueError('The "hf" token counter needs a tokenizer, as in "hf:<model>"')
        self.tokenizer_name = tokenizer_name
        self.name = "{}:{}".format(self.kind, tokenizer_name)
        self.tokenizer = _load_tokenizer(tokenizer_name)

    def count(self, text):
        if not text:
            return 0
        return len(self.tokenizer.encode(text, add_special_tokens=False))


COUNTERS = {
    ApproximateCounter.name: ApproximateCounter,
    WhitespaceCounter.name: WhitespaceCounter,
    HuggingFaceCounter.kind: HuggingFaceCounter,
}


def get_counter(name="approx"):
    """Return the counter called ``name``; ``hf:<model>`` selects a model's tokenizer."""
    kind, _, argument = name.partition(":")
    if kind not in COUNTERS:
        raise ValueError(
            '"{}" is not a known token counter; use one of {}'.format(
                name, ", ".join(sorted(COUNTERS))
            )
        )
    if kind == HuggingFaceCounter.kind:
        return HuggingFaceCounter(argument)
    if argument:
        raise ValueError('The "{}" token counter takes no argument'.format(kind))
    return COUNTERS[kind]()


def count_tokens(text, counter):
    return counter.count(text)


def count_message(message, counter):
    """Count a chat message, including the names and arguments of its tool calls."""
    text = message.content
    for call in message.tool_calls:
        text += "\n" + call.name + json.dumps(call.arguments, sort_keys=True)
    return counter.count(text)
