"""Prompt rendering, completion parsing, and generation clients for QA pairs.

Two prompt templates are shipped: one asking for a question answerable from
a single short segment, one asking for a multi-hop question over several
pieces. The templates are fixed benchmark text; rendering only substitutes
the context block and appends a one-line completion-format note so that any
backend emits a parseable ``### Answer ###:`` delimiter.

Backends implement ``GeneratorClient``: the offline mock is fully
deterministic and keeps the whole pipeline hermetic, while the remote
client speaks a small HTTP JSON protocol with client-side rate limiting.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import requests

from .corpus import Segment
from .errors import GenerationError, ParseError, TransportError

logger = logging.getLogger(__name__)

CONTEXT_MARKER = "### Context ###:"
QUESTION_CUE = "### Question ###:"
ANSWER_DELIMITER = "### Answer ###:"

# Appended to every rendered prompt so completions carry an explicit
# question/answer delimiter; the template text above it stays untouched.
ANSWER_FORMAT_NOTE = (
    "Write the question, then a line '### Answer ###:', then the answer."
)

_FINE_RULES = """\
Generate one question and the answer from the given context. The question should be highly specific to the information provided in the context. It should not be a general question that suits any context.
Rules to follow when generate the question:
1. The question should be fully answerable from information present in given context.
2. Make sure the question is clear and unambiguous.
3. Phrases like 'based on the provided context', 'according to the context', etc, are not allowed to appear in the question.
Rules to follow when generate the answer:
1. The answer must use the information provided in the context.
2. Do not just copy words from the context. Answer the question in your own words."""

_MULTIHOP_RULES = """\
Generate one question and the answer from the given context. The context contains several pieces. Answering the question should require the reader to make multiple logical connections or inferences using **at least two pieces**.
Rules to follow when generate the question:
1. The question should be fully answerable from information present in given context.
2. Make sure the question is clear and unambiguous.
3. Phrases like 'based on the provided context', 'according to the context', etc, are not allowed to appear in the question.
Rules to follow when generate the answer:
1. The answer must use the information provided in the context.
2. Do not just copy words from the context. Answer the question in your own words."""


@dataclass(frozen=True)
class PromptTemplate:
    kind: str  # fine_grained | multi_hop
    body: str  # full template text with a {context} slot


FINE_PROMPT = PromptTemplate(
    kind="fine_grained",
    body=_FINE_RULES + "\n\n" + CONTEXT_MARKER + "\n{context}\n\n" + QUESTION_CUE,
)

MULTIHOP_PROMPT = PromptTemplate(
    kind="multi_hop",
    body=_MULTIHOP_RULES + "\n\n" + CONTEXT_MARKER + "\n{context}\n\n" + QUESTION_CUE,
)

# Everything between the context block and the end of a rendered prompt.
_PROMPT_TAIL = "\n\n" + ANSWER_FORMAT_NOTE + "\n\n" + QUESTION_CUE


def _render(template: PromptTemplate, context_block: str) -> str:
    filled = template.body.replace("{context}", context_block)
    head = filled[: -len("\n\n" + QUESTION_CUE)]
    return head + _PROMPT_TAIL


def render_fine_prompt(seg: Segment) -> str:
    """Fill the single-segment template; the prompt ends at the question cue."""
    if not seg.text.strip():
        raise ValueError("segment text is empty")
    return _render(FINE_PROMPT, seg.text)


def render_multihop_prompt(segs: list[Segment]) -> str:
    """Fill the multi-piece template with one '# Piece k:' entry per segment."""
    if len(segs) < 2:
        raise ValueError(f"multi-hop prompt needs >= 2 segments, got {len(segs)}")
    pieces = "\n".join(f"# Piece {k}: {seg.text}" for k, seg in enumerate(segs, start=1))
    return _render(MULTIHOP_PROMPT, pieces)


_ANSWER_SPLIT = re.compile(r"^[ \t]*###[ \t]*answer[ \t]*###[ \t]*:[ \t]*", re.I | re.M)


def parse_completion(completion: str) -> tuple[str, str]:
    """Split a completion into (question, answer) at the first answer line.

    The delimiter match tolerates extra spaces and any casing. Raises
    ParseError (carrying the raw completion) when the delimiter is missing
    or either side is empty after trimming.
    """
    m = _ANSWER_SPLIT.search(completion)
    if m is None:
        raise ParseError("completion has no '### Answer ###:' line", completion)
    question = completion[: m.start()].strip()
    answer = completion[m.end() :].strip()
    if not question:
        raise ParseError("empty question before the answer delimiter", completion)
    if not answer:
        raise ParseError("empty answer after the answer delimiter", completion)
    return question, answer


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    kind: str  # fine_grained | multi_hop
    source_segment_ids: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("QAPair question and answer must be non-empty")
        n = len(self.source_segment_ids)
        if self.kind == "fine_grained" and n != 1:
            raise ValueError(f"fine_grained pair must have exactly 1 source segment, got {n}")
        if self.kind == "multi_hop" and n < 2:
            raise ValueError(f"multi_hop pair must have >= 2 source segments, got {n}")
        if self.kind not in ("fine_grained", "multi_hop"):
            raise ValueError(f"unknown QA kind {self.kind!r}")


class GeneratorClient(Protocol):
    def complete(self, prompt: str) -> str: ...


# ---------------------------------------------------------------------------
# offline deterministic mock


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_PIECE_LINE = re.compile(r"^# Piece \d+: ", re.M)
_STOPWORDS = frozenset(
    "the a an and or of in on to is are was were this that with for as at it".split()
)


def _first_sentence(text: str) -> str:
    parts = _SENTENCE_END.split(text.strip(), maxsplit=1)
    return parts[0].strip() or text.strip()


def _content_words(text: str, k: int = 3) -> list[str]:
    words = [w.strip(".,;:!?()[]{}'\"") for w in text.split()]
    picked = [w for w in words if w and w.lower() not in _STOPWORDS][:k]
    return picked or [w for w in words if w][:k]


def _extract_context_block(prompt: str) -> str:
    marker = CONTEXT_MARKER + "\n"
    start = prompt.find(marker)
    tail_at = prompt.rfind(_PROMPT_TAIL)
    if start < 0 or tail_at < 0:
        raise ValueError("prompt has no context block")
    return prompt[start + len(marker) : tail_at]


def _split_pieces(context_block: str) -> list[str]:
    if not _PIECE_LINE.match(context_block):
        return [context_block]
    texts = _PIECE_LINE.split(context_block)
    return [t.rstrip("\n") for t in texts if t.strip()]


def mock_generate(prompt: str, seed: int = 0) -> str:
    """Deterministic stand-in completion for hermetic runs.

    The question embeds the first content words of each context piece and
    the answer is the first sentence of each piece, concatenated. Identical
    (prompt, seed) always yields identical output.
    """
    pieces = _split_pieces(_extract_context_block(prompt))
    topics = " and ".join(" ".join(_content_words(p)) for p in pieces)
    answer = " ".join(_first_sentence(p) for p in pieces)
    return f"What does the passage state about {topics}?\n{ANSWER_DELIMITER}\n{answer}"


class MockGeneratorClient:
    """GeneratorClient backed by mock_generate; no I/O, no randomness."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def complete(self, prompt: str) -> str:
        return mock_generate(prompt, self.seed)


# ---------------------------------------------------------------------------
# remote HTTP client


class RateLimiter:
    """Token bucket limiting calls to ``rpm`` requests per minute."""

    def __init__(
        self,
        rpm: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rpm <= 0:
            raise ValueError("rpm must be positive")
        self.rate = rpm / 60.0
        self.capacity = float(rpm)
        self._tokens = float(rpm)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class RemoteGeneratorClient:
    """HTTP JSON generation endpoint.

    Request body: {"prompt": str, "temperature": float, "max_tokens": int}.
    Expected response body: {"text": str}. Greedy decoding (temperature 0)
    is the default. The bearer token is read from the environment variable
    named by ``auth_env`` at call time, never stored in config files.
    """

    def __init__(
        self,
        endpoint: str,
        auth_env: str | None = None,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        timeout: float = 120.0,
        rpm: float | None = None,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.auth_env = auth_env
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self._limiter = RateLimiter(rpm) if rpm else None
        self._session = session or requests.Session()

    def complete(self, prompt: str) -> str:
        if self._limiter is not None:
            self._limiter.acquire()
        headers = {}
        if self.auth_env:
            token = os.environ.get(self.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        payload = {
            "prompt": prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        try:
            resp = self._session.post(
                self.endpoint, json=payload, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"endpoint returned HTTP {resp.status_code}")
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError) as exc:
            raise TransportError(f"malformed endpoint response: {exc}") from exc
        if not isinstance(text, str):
            raise TransportError("endpoint response 'text' is not a string")
        return text


# ---------------------------------------------------------------------------
# generation driver


@dataclass
class RetryPolicy:
    """Separate budgets for transport retries and parse retries."""

    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)


def call_with_retries(client: GeneratorClient, prompt: str, policy: RetryPolicy) -> str:
    """One completion with exponential backoff on transport failures."""
    last: TransportError | None = None
    for attempt in range(policy.max_attempts):
        try:
            return client.complete(prompt)
        except TransportError as exc:
            last = exc
            if attempt + 1 < policy.max_attempts:
                delay = policy.backoff_base * policy.backoff_factor**attempt
                logger.warning("transport error (attempt %d): %s", attempt + 1, exc)
                policy.sleep(delay)
    raise GenerationError(
        f"transport failed after {policy.max_attempts} attempts: {last}"
    ) from last


def generate_qa(
    seg_or_segs: Segment | list[Segment],
    kind: str,
    client: GeneratorClient,
    policy: RetryPolicy | None = None,
) -> QAPair:
    """Render the prompt for ``kind``, call the client, parse a QAPair.

    Unparseable completions are retried up to the policy budget and then
    surrendered with a GenerationError carrying the last raw completion;
    callers drop the example and log it, never repair it.
    """
    policy = policy or RetryPolicy()
    segs = [seg_or_segs] if isinstance(seg_or_segs, Segment) else list(seg_or_segs)
    if kind == "fine_grained":
        if len(segs) != 1:
            raise ValueError("fine_grained generation takes exactly one segment")
        prompt = render_fine_prompt(segs[0])
    elif kind == "multi_hop":
        prompt = render_multihop_prompt(segs)
    else:
        raise ValueError(f"unknown QA kind {kind!r}")

    last_completion = ""
    for attempt in range(policy.max_attempts):
        completion = call_with_retries(client, prompt, policy)
        last_completion = completion
        try:
            question, answer = parse_completion(completion)
        except ParseError as exc:
            logger.warning("parse failure (attempt %d): %s", attempt + 1, exc)
            continue
        return QAPair(
            question=question,
            answer=answer,
            kind=kind,
            source_segment_ids=tuple((s.doc_id, s.start_token) for s in segs),
        )
    err = GenerationError(
        f"no parseable completion after {policy.max_attempts} attempts"
    )
    err.last_completion = last_completion
    raise err
