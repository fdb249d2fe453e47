"""Vocabulary, fused input composition, and pretrained word vectors.

The composed input for one text is ``[CLS] S1 [SEP] S2 [SEP]`` where S1
is the preprocessed token sequence and S2 the extracted domain keywords.
Segment ids separate the two parts, and a keyword mask marks every
position holding a domain keyword so the deep-fusion layer knows where
to inject synonym information.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, embedding as embedding_lookup
from .lexicon import KeywordSet

__all__ = [
    "Vocab",
    "ModelInput",
    "EmbeddingTable",
    "SynonymSet",
    "VectorFormatError",
    "build_vocab",
    "compose_tokens",
    "compose_input",
    "embed",
    "load_embedding_table",
    "nearest_synonyms",
    "build_synonym_catalog",
    "batch_embed",
]

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3


class Vocab:
    """Word/id bijection with four reserved tokens at ids 0..3."""

    def __init__(self, words: Sequence[str]):
        self.id_to_word: list = list(RESERVED) + [w for w in words if w not in RESERVED]
        self.word_to_id: dict = {w: i for i, w in enumerate(self.id_to_word)}

    def id(self, word: str) -> int:
        return self.word_to_id.get(word, UNK_ID)

    def word(self, idx: int) -> str:
        return self.id_to_word[idx]

    def __len__(self) -> int:
        return len(self.id_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def encode(self, tokens: Iterable[str]) -> list:
        return [self.id(t) for t in tokens]

    def export(self, path: str | Path) -> None:
        """Write ``word<TAB>id`` lines in id order."""
        lines = "".join(f"{w}\t{i}\n" for i, w in enumerate(self.id_to_word))
        Path(path).write_text(lines, encoding="utf-8")


def build_vocab(token_sequences: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    """Build a vocabulary from training-fold token sequences.

    Keeps every token with frequency >= ``min_freq``.  Id assignment is
    deterministic: frequency descending, then lexicographic.
    """
    freq: dict = {}
    n_seqs = 0
    for seq in token_sequences:
        n_seqs += 1
        for tok in seq:
            freq[tok] = freq.get(tok, 0) + 1
    if n_seqs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (w for w, c in freq.items() if c >= min_freq and w not in RESERVED),
        key=lambda w: (-freq[w], w),
    )
    return Vocab(kept)


@dataclass
class ModelInput:
    """One composed, padded sequence ready for the encoder.

    All arrays share the same length T (the padded maximum length).
    Two-segment composition carries two separators; the single-segment
    baseline composition (``keywords=None``) carries one.
    """

    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray
    keyword_mask: np.ndarray
    label: int = 0


@dataclass
class ComposedText:
    """The unpadded composed token strings, kept for fusion-context lookup."""

    tokens: list
    segment_ids: list


def compose_tokens(
    s1_tokens: Sequence[str],
    keywords: KeywordSet | None,
    max_len: int,
) -> ComposedText:
    """Assemble ``[CLS] S1 [SEP] S2 [SEP]`` token strings within ``max_len``.

    When the budget is exceeded, S1 is truncated first so the extracted
    keywords survive; S2 is truncated only if it alone exceeds the budget.
    With ``keywords=None`` the sequence is the single-segment
    ``[CLS] S1 [SEP]``.
    """
    if max_len < 4:
        raise ValueError(f"max_len must be >= 4, got {max_len}")
    s1 = list(s1_tokens)
    if keywords is None:
        s1 = s1[: max_len - 2]
        return ComposedText([CLS] + s1 + [SEP], [0] * (len(s1) + 2))
    s2 = list(keywords.keywords)
    budget = max_len - 3
    s1_keep = min(len(s1), max(0, budget - len(s2)))
    s2_keep = min(len(s2), budget - s1_keep)
    s1, s2 = s1[:s1_keep], s2[:s2_keep]
    tokens = [CLS] + s1 + [SEP] + s2 + [SEP]
    segment_ids = [0] * (len(s1) + 2) + [1] * (len(s2) + 1)
    return ComposedText(tokens, segment_ids)


def compose_input(
    s1_tokens: Sequence[str],
    keywords: KeywordSet | None,
    vocab: Vocab,
    max_len: int,
    keyword_scope: str = "both",
    label: int = 0,
) -> ModelInput:
    """Build the padded :class:`ModelInput` for one text.

    ``keyword_scope`` controls where the keyword mask is set: ``"both"``
    marks keyword tokens in S1 and S2, ``"s2"`` only in the keyword
    segment.
    """
    if keyword_scope not in ("both", "s2"):
        raise ValueError(f"keyword_scope must be 'both' or 's2', got {keyword_scope!r}")
    composed = compose_tokens(s1_tokens, keywords, max_len)
    kw = set(keywords.keywords) if keywords is not None else set()
    n = len(composed.tokens)
    token_ids = np.zeros(max_len, dtype=np.int64)
    segment_ids = np.zeros(max_len, dtype=np.int64)
    attention_mask = np.zeros(max_len, dtype=np.int64)
    keyword_mask = np.zeros(max_len, dtype=np.int64)
    token_ids[:n] = vocab.encode(composed.tokens)
    segment_ids[:n] = composed.segment_ids
    attention_mask[:n] = 1
    for i, (tok, seg) in enumerate(zip(composed.tokens, composed.segment_ids)):
        if tok in kw and (keyword_scope == "both" or seg == 1):
            keyword_mask[i] = 1
    return ModelInput(
        token_ids=token_ids,
        segment_ids=segment_ids,
        position_ids=np.arange(max_len, dtype=np.int64),
        attention_mask=attention_mask,
        keyword_mask=keyword_mask,
        label=label,
    )


def embed(inp: ModelInput, tok_emb: Tensor, seg_emb: Tensor, pos_emb: Tensor) -> Tensor:
    """Sum token, segment, and position embeddings for one input: (T, d)."""
    t = embedding_lookup(tok_emb, inp.token_ids)
    s = embedding_lookup(seg_emb, inp.segment_ids)
    p = embedding_lookup(pos_emb, inp.position_ids)
    return t + s + p


class VectorFormatError(ValueError):
    """Raised when a word-vector file does not parse."""


class EmbeddingTable:
    """Pretrained word vectors: a (n_words, dim) matrix plus a word index."""

    def __init__(self, words: Sequence[str], matrix: np.ndarray):
        if matrix.ndim != 2 or len(words) != matrix.shape[0]:
            raise ValueError("words and matrix rows must align")
        if not np.isfinite(matrix).all():
            raise ValueError("embedding table contains NaN or Inf entries")
        self.words = list(words)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.dim = matrix.shape[1]
        self._index = {w: i for i, w in enumerate(self.words)}

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __len__(self) -> int:
        return len(self.words)

    def get(self, word: str) -> np.ndarray | None:
        i = self._index.get(word)
        return None if i is None else self.matrix[i]

    def save(self, path: str | Path, header: bool = True) -> None:
        """Write the table in word2vec text format."""
        with open(path, "w", encoding="utf-8") as f:
            if header:
                f.write(f"{len(self.words)} {self.dim}\n")
            for w, row in zip(self.words, self.matrix):
                f.write(w + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embedding_table(path: str | Path) -> EmbeddingTable:
    """Parse a word2vec text file (optional ``count dim`` header line).

    Every line after the header is ``word v1 ... v_dim``.  The first
    occurrence of a duplicated word wins (with a warning); inconsistent
    dimensions or non-numeric components are format errors reporting the
    line number.
    """
    path = Path(path)
    words: list = []
    rows: list = []
    index: dict = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    start = 0
    if lines:
        head = lines[0].split()
        if len(head) == 2:
            try:
                int(head[0]), int(head[1])
                start = 1
            except ValueError:
                start = 0
    for lineno in range(start, len(lines)):
        parts = lines[lineno].split()
        if not parts:
            continue
        word, comps = parts[0], parts[1:]
        if dim is None:
            dim = len(comps)
            if dim == 0:
                raise VectorFormatError(f"{path}:{lineno + 1}: no vector components")
        elif len(comps) != dim:
            raise VectorFormatError(
                f"{path}:{lineno + 1}: expected {dim} components, found {len(comps)}"
            )
        try:
            vec = [float(c) for c in comps]
        except ValueError as e:
            raise VectorFormatError(f"{path}:{lineno + 1}: non-numeric component ({e})") from e
        if word in index:
            logger.warning("duplicate word %r at %s:%d ignored (first wins)", word, path, lineno + 1)
            continue
        index[word] = len(words)
        words.append(word)
        rows.append(vec)
    if not words:
        raise VectorFormatError(f"{path}: no vectors found")
    return EmbeddingTable(words, np.array(rows, dtype=np.float64))


@dataclass
class SynonymSet:
    """Nearest neighbors of one keyword in the embedding table."""

    keyword: str
    synonyms: list
    vectors: np.ndarray  # (h, dim)

    @property
    def h(self) -> int:
        return len(self.synonyms)


def nearest_synonyms(keyword: str, table: EmbeddingTable, h_max: int) -> SynonymSet:
    """The up-to-``h_max`` words most cosine-similar to ``keyword``.

    The keyword itself is excluded; ties break lexicographically; a
    keyword absent from the table yields an empty set.  Zero-norm vectors
    are treated as having similarity 0 to everything.
    """
    if h_max < 1:
        raise ValueError(f"h_max must be >= 1, got {h_max}")
    query = table.get(keyword)
    if query is None:
        return SynonymSet(keyword, [], np.zeros((0, table.dim)))
    qn = np.linalg.norm(query)
    norms = np.linalg.norm(table.matrix, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = table.matrix @ query / (norms * qn)
    sims = np.where((norms == 0) | (qn == 0), 0.0, sims)
    order = sorted(
        (i for i, w in enumerate(table.words) if w != keyword),
        key=lambda i: (-sims[i], table.words[i]),
    )
    chosen = order[:h_max]
    return SynonymSet(
        keyword,
        [table.words[i] for i in chosen],
        table.matrix[chosen].copy() if chosen else np.zeros((0, table.dim)),
    )


def build_synonym_catalog(
    keywords: Iterable[str], table: EmbeddingTable | None, h_max: int
) -> dict:
    """Map each keyword to its (possibly empty) :class:`SynonymSet`.

    Keywords absent from the table, or when no table is given, get empty
    sets and later pass through the fusion layer unchanged.
    """
    catalog: dict = {}
    for kw in sorted(set(keywords)):
        if table is None:
            catalog[kw] = SynonymSet(kw, [], np.zeros((0, 0)))
        else:
            catalog[kw] = nearest_synonyms(kw, table, h_max)
    return catalog


def batch_embed(
    token_ids: np.ndarray,
    segment_ids: np.ndarray,
    tok_emb: Tensor,
    seg_emb: Tensor,
    pos_emb: Tensor,
) -> Tensor:
    """Batched version of :func:`embed` over (B, T) id arrays."""
    B, T = token_ids.shape
    pos_ids = np.broadcast_to(np.arange(T), (B, T))
    t = embedding_lookup(tok_emb, token_ids)
    s = embedding_lookup(seg_emb, segment_ids)
    p = embedding_lookup(pos_emb, pos_ids)
    return t + s + p
