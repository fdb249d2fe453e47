"""Domain dictionary construction and trie-based keyword extraction.

A side-effect phrase file (one phrase per line) is normalized into a flat
set of single words, stored in a prefix tree, and matched against
preprocessed input tokens to pull out the domain keywords of a sentence.

Matching is whole-token exact match: a dictionary word is reported only
when it appears as a complete token of the input, never as a substring
of a longer token.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

__all__ = [
    "DictionaryConfig",
    "LexiconTrie",
    "KeywordSet",
    "default_stopwords",
    "build_dictionary",
    "build_trie",
    "extract_keywords",
    "read_phrase_file",
    "export_dictionary",
    "load_dictionary",
]

_NON_ALPHA = re.compile(r"[^a-z]")
_DIGIT = re.compile(r"[0-9]")


def default_stopwords() -> frozenset:
    """The stopword list shipped with the package (~180 common English words)."""
    text = resources.files("lexfuse").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(w for w in text.split() if w)


@dataclass(frozen=True)
class DictionaryConfig:
    """Normalization rules for building the domain dictionary.

    ``min_word_length`` keeps only words of at least that many characters
    (default 3, which drops most abbreviations and stray fragments);
    ``strip_digits`` removes any token containing a digit.
    """

    stopword_list: frozenset = field(default_factory=default_stopwords)
    min_word_length: int = 3
    strip_digits: bool = True

    def __post_init__(self):
        if self.min_word_length < 1:
            raise ValueError(f"min_word_length must be >= 1, got {self.min_word_length}")
        if not self.stopword_list:
            raise ValueError("stopword_list must be non-empty")


def build_dictionary(raw_phrases: Iterable[str], cfg: DictionaryConfig | None = None) -> set:
    """Normalize raw side-effect phrases into a flat set of dictionary words.

    Each phrase is split on whitespace and every token is lowercased,
    checked for digits, stripped of any character outside a–z, and kept
    only if it is not a stopword and meets the minimum length.
    """
    cfg = cfg or DictionaryConfig()
    words: set = set()
    for phrase in raw_phrases:
        for token in phrase.split():
            token = token.lower()
            if cfg.strip_digits and _DIGIT.search(token):
                continue
            token = _NON_ALPHA.sub("", token)
            if not token or token in cfg.stopword_list:
                continue
            if len(token) < cfg.min_word_length:
                continue
            words.add(token)
    return words


class _TrieNode:
    __slots__ = ("children", "terminal")

    def __init__(self):
        self.children: dict = {}
        self.terminal = False


class LexiconTrie:
    """Prefix tree over dictionary words; immutable after construction.

    ``lookup`` is whole-word membership: prefixes and extensions of a
    stored word do not match.
    """

    def __init__(self):
        self._root = _TrieNode()
        self.word_count = 0

    def _insert(self, word: str) -> None:
        node = self._root
        for ch in word:
            node = node.children.setdefault(ch, _TrieNode())
        if not node.terminal:
            node.terminal = True
            self.word_count += 1

    def lookup(self, word: str) -> bool:
        node = self._root
        for ch in word:
            node = node.children.get(ch)
            if node is None:
                return False
        return node.terminal

    def __contains__(self, word: str) -> bool:
        return self.lookup(word)

    def __len__(self) -> int:
        return self.word_count

    def words(self) -> Iterator[str]:
        """Yield all stored words in lexicographic order."""
        stack = [("", self._root)]
        while stack:
            prefix, node = stack.pop()
            if node.terminal:
                yield prefix
            for ch in sorted(node.children, reverse=True):
                stack.append((prefix + ch, node.children[ch]))


def build_trie(words: Iterable[str]) -> LexiconTrie:
    """Build a :class:`LexiconTrie` from already-normalized words."""
    trie = LexiconTrie()
    for w in words:
        trie._insert(w)
    return trie


@dataclass
class KeywordSet:
    """Domain keywords extracted from one text, in first-occurrence order."""

    keywords: list

    @property
    def m(self) -> int:
        return len(self.keywords)

    def __iter__(self):
        return iter(self.keywords)

    def __len__(self):
        return len(self.keywords)

    def __bool__(self):
        return bool(self.keywords)


def extract_keywords(tokens: Iterable[str], trie: LexiconTrie) -> KeywordSet:
    """Collect the distinct input tokens found in the dictionary.

    Order follows first occurrence in ``tokens``; duplicates are dropped.
    """
    seen: set = set()
    keywords: list = []
    for tok in tokens:
        if tok in seen:
            continue
        if trie.lookup(tok):
            seen.add(tok)
            keywords.append(tok)
        # non-matching tokens are not remembered: the seen-set only needs
        # to deduplicate accepted keywords
    return KeywordSet(keywords)


def read_phrase_file(path: str | Path) -> list:
    """Read a UTF-8 phrase file, one phrase per line; blank lines are skipped."""
    path = Path(path)
    phrases: list = []
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IOError(f"cannot read phrase file {path}: {e}") from e
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        try:
            text = line.decode("utf-8").strip()
        except UnicodeDecodeError as e:
            raise IOError(f"{path}:{lineno}: not valid UTF-8 ({e})") from e
        if text:
            phrases.append(text)
    return phrases


def export_dictionary(words: Iterable[str], path: str | Path) -> None:
    """Write dictionary words one per line, sorted, for stable diffing."""
    Path(path).write_text("".join(w + "\n" for w in sorted(words)), encoding="utf-8")


def load_dictionary(path: str | Path) -> set:
    """Read a compiled dictionary export (one word per line)."""
    return {w for w in Path(path).read_text(encoding="utf-8").split() if w}
