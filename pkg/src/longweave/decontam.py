"""N-gram overlap filter between candidate raw texts and evaluation data.

A text is contaminated when any contiguous run of n words (default 10) also
appears in any reference text. Grams are taken over lowercased whitespace
words with edge punctuation stripped, so the check is independent of any
model tokenizer and stable across runs.

Contaminated documents must be blocked from both roles in the pipeline:
as QA sources and as filler material.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DecontamError

DEFAULT_NGRAM_SIZE = 10

_EDGE_PUNCT = string.punctuation + "“”‘’"


def normalize_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation per word.

    Words that are pure punctuation vanish entirely.
    """
    out = []
    for raw in text.lower().split():
        w = raw.strip(_EDGE_PUNCT)
        if w:
            out.append(w)
    return out


@dataclass
class NgramIndex:
    """Set of word n-grams from the reference texts.

    Grams are stored as word tuples in a set: the hash probe is the
    prefilter and tuple equality settles membership, so there are no
    probabilistic false positives.
    """

    n: int = DEFAULT_NGRAM_SIZE
    grams: set[tuple[str, ...]] = field(default_factory=set)
    normalization: str = "lowercase-whitespace"

    def __post_init__(self):
        if self.n < 2:
            raise DecontamError(f"n-gram size must be >= 2, got {self.n}")


def build_ngram_index(references: list[str], n: int = DEFAULT_NGRAM_SIZE) -> NgramIndex:
    """Index every contiguous n-word gram of every reference text."""
    index = NgramIndex(n=n)
    for ref in references:
        words = normalize_words(ref)
        for i in range(len(words) - n + 1):
            index.grams.add(tuple(words[i : i + n]))
    return index


def is_contaminated(text: str, index: NgramIndex) -> bool:
    """True iff any n-gram of ``text`` appears in the index."""
    if not index.grams:
        return False
    words = normalize_words(text)
    n = index.n
    for i in range(len(words) - n + 1):
        if tuple(words[i : i + n]) in index.grams:
            return True
    return False


def load_reference_texts(paths: list[str | Path]) -> list[str]:
    """Read reference texts from JSONL files with a ``text`` field."""
    texts: list[str] = []
    for p in paths:
        with Path(p).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                text = record.get("text")
                if isinstance(text, str) and text.strip():
                    texts.append(text)
    return texts
