"""Corpus ingestion and token-level segmentation.

Documents come from JSONL files (one object per line with a required ``text``
field) or from a directory of plain-text files. Token counting goes through a
pluggable tokenizer so the whole pipeline stays vocabulary-agnostic; the
bundled whitespace tokenizer makes every count hand-checkable in tests.

Segments are the minimum information unit downstream: contiguous windows of
at most 128 tokens cut from a document.
"""

from __future__ import annotations

import json
import logging
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol

from .errors import CorpusError, DocumentTooShortError

logger = logging.getLogger(__name__)

SEGMENT_TOKENS = 128
# Trailing remainders shorter than this carry too little information to
# anchor a QA pair and are dropped (unless they are the whole document).
MIN_REMAINDER_TOKENS = 32


@dataclass(frozen=True)
class RawDocument:
    """One corpus text with identity and provenance."""

    id: str
    text: str
    source: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError(f"document {self.id!r} has empty text")


class Tokenizer(Protocol):
    """Minimal tokenizer contract: deterministic encode/decode.

    decode(encode(t)) may normalize whitespace but must preserve tokens;
    the token count of a fixed input never changes.
    """

    name: str

    def encode(self, text: str) -> list[int]: ...

    def decode(self, token_ids: list[int]) -> str: ...


class WhitespaceTokenizer:
    """Word tokenizer: one token per whitespace-separated word.

    Ids are assigned in first-seen order behind a lock, so concurrent
    pipelines can share one instance. Decoded text joins words with single
    spaces, which is the only normalization applied.
    """

    name = "whitespace"

    def __init__(self):
        self._word_to_id: dict[str, int] = {}
        self._id_to_word: list[str] = []
        self._lock = threading.Lock()

    def encode(self, text: str) -> list[int]:
        words = text.split()
        with self._lock:
            ids = []
            for w in words:
                i = self._word_to_id.get(w)
                if i is None:
                    i = len(self._id_to_word)
                    self._word_to_id[w] = i
                    self._id_to_word.append(w)
                ids.append(i)
        return ids

    def decode(self, token_ids: list[int]) -> str:
        with self._lock:
            return " ".join(self._id_to_word[i] for i in token_ids)


TOKENIZERS = {
    "whitespace": WhitespaceTokenizer,
}


def make_tokenizer(spec: str) -> Tokenizer:
    try:
        return TOKENIZERS[spec]()
    except KeyError:
        raise CorpusError(f"unknown tokenizer {spec!r}; known: {sorted(TOKENIZERS)}")


@dataclass(frozen=True)
class Segment:
    """A contiguous <=128-token window of one document."""

    doc_id: str
    token_ids: tuple[int, ...]
    text: str
    start_token: int

    def __post_init__(self):
        if not 1 <= len(self.token_ids) <= SEGMENT_TOKENS:
            raise CorpusError(
                f"segment must hold 1..{SEGMENT_TOKENS} tokens, got {len(self.token_ids)}"
            )
        if self.start_token < 0:
            raise CorpusError(f"negative start_token {self.start_token}")

    def __len__(self) -> int:
        return len(self.token_ids)


def count_tokens(text: str, tok: Tokenizer) -> int:
    return len(tok.encode(text))


def load_corpus(
    path: str | Path,
    format: str = "jsonl",
    skip_malformed: bool = False,
) -> Iterator[RawDocument]:
    """Yield documents from ``path`` in file order.

    jsonl: one object per line with a required ``text`` field; ``id`` and
    ``source`` are optional (missing ids become "<filename>:<lineno>").
    plain-dir: every file under the directory, sorted by name, one document
    per file with the file name as id.

    Malformed records (bad JSON, missing/empty text, duplicate id) raise
    CorpusError with the offending location, or are skipped with a warning
    when ``skip_malformed`` is set.
    """
    path = Path(path)
    if format == "jsonl":
        yield from _load_jsonl(path, skip_malformed)
    elif format == "plain-dir":
        yield from _load_plain_dir(path, skip_malformed)
    else:
        raise CorpusError(f"unknown corpus format {format!r}")


def _load_jsonl(path: Path, skip_malformed: bool) -> Iterator[RawDocument]:
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                doc = _doc_from_record(json.loads(line), default_id=where)
                if doc.id in seen_ids:
                    raise CorpusError(f"duplicate document id {doc.id!r}")
                seen_ids.add(doc.id)
            except (json.JSONDecodeError, CorpusError, TypeError) as exc:
                if skip_malformed:
                    logger.warning("skipping malformed record at %s: %s", where, exc)
                    continue
                raise CorpusError(f"malformed record at {where}: {exc}") from exc
            yield doc


def _doc_from_record(record, default_id: str) -> RawDocument:
    if not isinstance(record, dict):
        raise CorpusError("record is not an object")
    text = record.get("text")
    if not isinstance(text, str) or not text.strip():
        raise CorpusError("missing or empty 'text' field")
    doc_id = record.get("id")
    if doc_id is None:
        doc_id = default_id
    return RawDocument(id=str(doc_id), text=text, source=str(record.get("source", "")))


def _load_plain_dir(path: Path, skip_malformed: bool) -> Iterator[RawDocument]:
    if not path.is_dir():
        raise CorpusError(f"corpus directory not found: {path}")
    for file in sorted(p for p in path.iterdir() if p.is_file()):
        text = file.read_text(encoding="utf-8")
        if not text.strip():
            if skip_malformed:
                logger.warning("skipping empty file %s", file)
                continue
            raise CorpusError(f"empty corpus file: {file}")
        yield RawDocument(id=file.name, text=text, source=str(path))


def extract_random_segment(
    doc: RawDocument, tok: Tokenizer, rng: random.Random
) -> Segment:
    """Cut a 128-token window at a uniformly random valid offset."""
    ids = tok.encode(doc.text)
    if len(ids) < SEGMENT_TOKENS:
        raise DocumentTooShortError(
            f"document {doc.id!r} has {len(ids)} tokens, need >= {SEGMENT_TOKENS}"
        )
    start = rng.randint(0, len(ids) - SEGMENT_TOKENS)
    window = tuple(ids[start : start + SEGMENT_TOKENS])
    return Segment(
        doc_id=doc.id, token_ids=window, text=tok.decode(list(window)), start_token=start
    )


def split_segments(doc: RawDocument, tok: Tokenizer) -> list[Segment]:
    """Split a document into consecutive non-overlapping 128-token segments.

    A trailing remainder is kept as its own short segment when it has at
    least 32 tokens and dropped otherwise. A document shorter than 128
    tokens yields a single segment of its full length.
    """
    ids = tok.encode(doc.text)
    if not ids:
        return []
    segments: list[Segment] = []
    for start in range(0, len(ids), SEGMENT_TOKENS):
        window = ids[start : start + SEGMENT_TOKENS]
        if len(window) < SEGMENT_TOKENS:
            # Trailing remainder; keep it only if informative or if it is
            # the entire document.
            if len(window) < MIN_REMAINDER_TOKENS and segments:
                break
        segments.append(
            Segment(
                doc_id=doc.id,
                token_ids=tuple(window),
                text=tok.decode(window),
                start_token=start,
            )
        )
    return segments
