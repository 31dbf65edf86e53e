"""Engine-wide tokenizer and answer normalizer.

One tokenizer is used for chunking, context budgets and F1 so every token
count in the engine agrees. It is a word/punctuation splitter and does not
match any model's subword tokenizer.
"""

from __future__ import annotations

import re
import string

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_ARTICLES_RE = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character offsets ``(start, end)`` of every token in ``text``."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str) -> list[str]:
    """Split ``text`` into word and single-punctuation tokens.

    The gaps between tokens are whitespace only, so ``text`` is recovered
    from the tokens plus the separators ``text[end_i:start_{i+1}]``.
    """
    return _TOKEN_RE.findall(text)


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())
