"""Image and prompt tokenization plus subject-span detection.

Image tokens are lossless: one token per pixel equal to its palette index,
in raster order. Prompts use a closed vocabulary with exact-match lookup
and hard errors on unknown words; a reserved identifier block holds the
subject-identifier words that pretraining never uses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import synthdata

VOCAB_FORMAT = "lorafuse-vocabulary"
VOCAB_VERSION = 1

MAX_PROMPT_LEN = 32

_STRUCTURAL = ("a", "photo", "of", "on", "and", "background", "corner", "center")


class UnknownWordError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Ordered closed word list; token id equals list index."""

    words: tuple
    identifiers: tuple

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    def index(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise UnknownWordError(f"word not in vocabulary: {word!r}") from None

    def is_identifier(self, word: str) -> bool:
        return word in self.identifiers

    def save(self, path) -> None:
        doc = {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "words": list(self.words),
            "identifier_block": {
                "start": self.words.index(self.identifiers[0]),
                "count": len(self.identifiers),
            },
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != VOCAB_FORMAT:
            raise ValueError(f"not a vocabulary file: format {doc.get('format')!r}")
        if doc.get("version") != VOCAB_VERSION:
            raise ValueError(f"unsupported vocabulary version {doc.get('version')!r}")
        block = doc["identifier_block"]
        words = tuple(doc["words"])
        idents = tuple(words[block["start"] : block["start"] + block["count"]])
        return cls(words=words, identifiers=idents)


def default_vocabulary() -> Vocabulary:
    words = (
        _STRUCTURAL
        + synthdata.COLOR_WORDS
        + synthdata.CLASS_WORDS
        + synthdata.IDENTIFIERS
    )
    return Vocabulary(words=words, identifiers=synthdata.IDENTIFIERS)


DEFAULT_VOCAB = default_vocabulary()


@dataclass(frozen=True)
class PromptTokens:
    ids: tuple
    words: tuple

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class SubjectSpan:
    """Inclusive token span of one '<identifier> <class>' occurrence."""

    subject_id: str
    start: int
    end: int


def tokenize_prompt(text: str, vocab: Vocabulary | None = None) -> PromptTokens:
    """Whitespace split, lowercase, exact vocabulary lookup."""
    vocab = vocab or DEFAULT_VOCAB
    words = tuple(text.lower().split())
    if not words:
        raise ValueError("empty prompt")
    if len(words) > MAX_PROMPT_LEN:
        raise ValueError(f"prompt has {len(words)} tokens, maximum is {MAX_PROMPT_LEN}")
    ids = tuple(vocab.index(w) for w in words)
    return PromptTokens(ids=ids, words=words)


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Raster-order token sequence; token i is the palette index of pixel i."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected an H x W index image, got shape {img.shape}")
    if img.min(initial=0) < 0 or img.max(initial=0) >= synthdata.N_COLORS:
        raise ValueError("image contains values outside the palette")
    return img.reshape(-1).astype(np.int64)


def detokenize(tokens, height: int, width: int) -> np.ndarray:
    """Exact inverse of quantize_image."""
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1 or t.size != height * width:
        raise ValueError(f"expected {height * width} tokens, got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= synthdata.N_COLORS):
        bad = int(t[(t < 0) | (t >= synthdata.N_COLORS)][0])
        raise ValueError(f"token {bad} outside palette of size {synthdata.N_COLORS}")
    return t.reshape(height, width).astype(np.uint8)


def find_subject_spans(prompt: PromptTokens, subject_pairs) -> list:
    """All maximal '<identifier> <class>' occurrences for registered pairs.

    subject_pairs is an iterable of (identifier_word, class_word). Matching
    is exact on token words; the identifier alone never matches.
    """
    seen = {}
    lookup = {}
    for ident, cls in subject_pairs:
        if ident in seen and seen[ident] != cls:
            raise ValueError(
                f"identifier {ident!r} registered for both {seen[ident]!r} and {cls!r}"
            )
        seen[ident] = cls
        lookup[(ident, cls)] = f"{ident} {cls}"
    spans = []
    i = 0
    words = prompt.words
    while i < len(words) - 1:
        key = (words[i], words[i + 1])
        if key in lookup:
            spans.append(SubjectSpan(subject_id=lookup[key], start=i, end=i + 1))
            i += 2
        else:
            i += 1
    return spans
