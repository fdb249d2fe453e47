"""Text normalization for social-media posts.

The cleanup order is: URLs, user mentions and reserved tweet tokens,
emoji, lowercasing, in-place punctuation deletion, whitespace split,
digit-token removal, stopword removal.  An empty token list is a legal
result.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .lexicon import default_stopwords

__all__ = ["PreprocessRules", "preprocess"]

_URL = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_MENTION = re.compile(r"@\w+")
_RESERVED = re.compile(r"\b(?:RT|FAV)\b")
# the common emoji / pictograph / symbol blocks
_EMOJI = re.compile(
    "["
    "\U0001f000-\U0001faff"
    "\U00002600-\U000027bf"
    "\U0001f1e6-\U0001f1ff"
    "←-⇿"
    "⬀-⯿"
    "︎️"
    "]+"
)
_PUNCT = re.compile(r"[^a-z0-9\s]")
_DIGIT = re.compile(r"[0-9]")


@dataclass(frozen=True)
class PreprocessRules:
    stopword_list: frozenset = field(default_factory=default_stopwords)
    strip_urls: bool = True
    strip_mentions: bool = True
    strip_emoji: bool = True
    strip_digit_tokens: bool = True
    strip_stopwords: bool = True


def preprocess(raw_text: str, rules: PreprocessRules | None = None) -> list:
    """Normalize one text into a clean lowercase token list."""
    rules = rules or PreprocessRules()
    text = raw_text
    if rules.strip_urls:
        text = _URL.sub(" ", text)
    if rules.strip_mentions:
        text = _MENTION.sub(" ", text)
        text = _RESERVED.sub(" ", text)
    if rules.strip_emoji:
        text = _EMOJI.sub(" ", text)
    text = text.lower()
    text = _PUNCT.sub("", text)
    tokens = []
    for tok in text.split():
        if rules.strip_digit_tokens and _DIGIT.search(tok):
            continue
        if rules.strip_stopwords and tok in rules.stopword_list:
            continue
        tokens.append(tok)
    return tokens
