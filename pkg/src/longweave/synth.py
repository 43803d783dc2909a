"""Assemble long-context training examples and build the dataset mixture.

A long-context example places one or more gold segments among filler
segments drawn from the rest of the corpus, shuffled so the gold
information can sit anywhere, then concatenated up to a sampled target
length between 4K and 32K tokens. The mixture interleaves four record
kinds (single-segment QA, multi-hop QA, short-context QA on the original
document, and pass-through general instructions) at configurable ratios.

All randomness is derived from a master seed plus the example index, so
builds are byte-identical regardless of worker count or completion order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .corpus import (
    RawDocument,
    Segment,
    Tokenizer,
    count_tokens,
    extract_random_segment,
    split_segments,
)
from .decontam import NgramIndex, is_contaminated
from .errors import AssemblyError, ConfigError, GenerationError, PoolExhaustedError
from .qagen import GeneratorClient, QAPair, RetryPolicy, generate_qa
from .util import derive_seed

logger = logging.getLogger(__name__)

KIND_FINE = "fine_grained"
KIND_MULTIHOP = "multi_hop"
KIND_SHORT = "short_context"
KIND_GENERAL = "general_instruction"
KINDS = (KIND_FINE, KIND_MULTIHOP, KIND_SHORT, KIND_GENERAL)
LONG_CONTEXT_KINDS = (KIND_FINE, KIND_MULTIHOP)

MIN_TARGET_TOKENS = 4096
MAX_TARGET_TOKENS = 32768
# Assembly stops inside [target - LENGTH_WINDOW, target]; fillers are never
# truncated mid-segment.
LENGTH_WINDOW = 128

DEFAULT_RATIOS = {
    KIND_FINE: 0.63,
    KIND_MULTIHOP: 0.17,
    KIND_SHORT: 0.09,
    KIND_GENERAL: 0.11,
}

SEGMENT_SEPARATOR = "\n"


@dataclass(frozen=True)
class LongContextExample:
    """One training record: context, QA pair, and gold placement metadata."""

    context: str
    question: str
    answer: str
    kind: str
    target_tokens: int
    actual_tokens: int
    gold_placements: tuple[tuple[int, float], ...]  # (segment index, relative depth)
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown example kind {self.kind!r}")
        if self.kind in LONG_CONTEXT_KINDS:
            if not MIN_TARGET_TOKENS <= self.target_tokens <= MAX_TARGET_TOKENS:
                raise ValueError(
                    f"target_tokens {self.target_tokens} outside "
                    f"[{MIN_TARGET_TOKENS}, {MAX_TARGET_TOKENS}]"
                )
            if abs(self.actual_tokens - self.target_tokens) > LENGTH_WINDOW:
                raise ValueError(
                    f"actual_tokens {self.actual_tokens} not within "
                    f"{LENGTH_WINDOW} of target {self.target_tokens}"
                )
        if self.kind == KIND_FINE and len(self.gold_placements) != 1:
            raise ValueError("fine_grained example needs exactly 1 gold placement")
        if self.kind == KIND_MULTIHOP and len(self.gold_placements) < 2:
            raise ValueError("multi_hop example needs >= 2 gold placements")


@dataclass
class DatasetManifest:
    counts: dict[str, int]
    ratios: dict[str, float]
    seed: int
    corpus_fingerprints: dict[str, str]
    tokenizer_id: str

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "ratios": dict(self.ratios),
            "seed": self.seed,
            "corpus_fingerprints": dict(self.corpus_fingerprints),
            "tokenizer_id": self.tokenizer_id,
        }


def sample_target_length(
    rng: random.Random, lo: int = MIN_TARGET_TOKENS, hi: int = MAX_TARGET_TOKENS
) -> int:
    """Uniform integer token target in [lo, hi], both inclusive."""
    return rng.randint(lo, hi)


class FillerPool:
    """All segments of a corpus, indexed for exclusion by document.

    The pool itself is immutable after construction; per-example draw state
    lives in the assembler, so one pool serves many workers.
    """

    def __init__(self, docs: Sequence[RawDocument], tok: Tokenizer):
        self.segments: list[Segment] = []
        self._per_doc: dict[str, int] = {}
        for doc in docs:
            segs = split_segments(doc, tok)
            self._per_doc[doc.id] = len(segs)
            self.segments.extend(segs)

    def __len__(self) -> int:
        return len(self.segments)

    def eligible_count(self, exclude_doc_ids: frozenset[str]) -> int:
        excluded = sum(self._per_doc.get(d, 0) for d in exclude_doc_ids)
        return len(self.segments) - excluded


def _draw_fillers(
    pool: FillerPool,
    rng: random.Random,
    exclude_doc_ids: frozenset[str],
    gold_tokens: int,
    target: int,
) -> tuple[list[Segment], int]:
    """Draw distinct fillers until total tokens land in [target-128, target].

    Segments are atomic: a draw that would overshoot the target ends the
    fill (the running total is already within the window because every
    segment holds at most 128 tokens). Raises PoolExhaustedError only when
    the eligible pool empties while still below the window.
    """
    n = len(pool.segments)
    eligible = pool.eligible_count(exclude_doc_ids)
    tried: set[int] = set()
    fillers: list[Segment] = []
    cum = gold_tokens
    misses = 0
    while cum < target:
        if len(tried) >= eligible:
            if cum >= target - LENGTH_WINDOW:
                break
            raise PoolExhaustedError(
                f"filler pool exhausted at {cum}/{target} tokens "
                f"({eligible} eligible segments)"
            )
        idx = rng.randrange(n)
        seg = pool.segments[idx]
        if idx in tried or seg.doc_id in exclude_doc_ids:
            misses += 1
            if misses > 64:
                remaining = [
                    i
                    for i in range(n)
                    if i not in tried and pool.segments[i].doc_id not in exclude_doc_ids
                ]
                if not remaining:
                    if cum >= target - LENGTH_WINDOW:
                        break
                    raise PoolExhaustedError(
                        f"filler pool exhausted at {cum}/{target} tokens"
                    )
                idx = remaining[rng.randrange(len(remaining))]
                seg = pool.segments[idx]
                misses = 0
            else:
                continue
        tried.add(idx)
        misses = 0
        if cum + len(seg) <= target:
            fillers.append(seg)
            cum += len(seg)
        else:
            break
    return fillers, cum


# Markers of the training template; assembled contexts must not collide
# with them or the formatted record stops being splittable.
_TEMPLATE_MARKERS = ("### Context:", "### Instruction:")


def _check_template_markers(text: str, what: str) -> None:
    for marker in _TEMPLATE_MARKERS:
        if marker in text:
            raise AssemblyError(f"{what} contains reserved template marker {marker!r}")


def assemble_fine_example(
    seg: Segment,
    qa: QAPair,
    target: int,
    filler_source: FillerPool,
    rng: random.Random,
    seed: int = 0,
) -> LongContextExample:
    """Place one gold segment at a uniform slot among drawn fillers."""
    if qa.kind != KIND_FINE:
        raise ValueError(f"expected a fine_grained QA pair, got {qa.kind}")
    if len(seg) > target:
        raise AssemblyError(f"gold segment ({len(seg)} tokens) exceeds target {target}")
    fillers, actual = _draw_fillers(
        filler_source, rng, frozenset({seg.doc_id}), len(seg), target
    )
    slot = rng.randint(0, len(fillers))
    ordered = fillers[:slot] + [seg] + fillers[slot:]
    gold_offset = sum(len(f) for f in fillers[:slot])
    context = SEGMENT_SEPARATOR.join(s.text for s in ordered)
    _check_template_markers(context, "assembled context")
    return LongContextExample(
        context=context,
        question=qa.question,
        answer=qa.answer,
        kind=KIND_FINE,
        target_tokens=target,
        actual_tokens=actual,
        gold_placements=((slot, gold_offset / actual),),
        seed=seed,
    )


def assemble_multihop_example(
    segs: list[Segment],
    qa: QAPair,
    target: int,
    filler_source: FillerPool,
    rng: random.Random,
    seed: int = 0,
) -> LongContextExample:
    """Jointly shuffle all gold segments with fillers in one uniform pass."""
    if qa.kind != KIND_MULTIHOP:
        raise ValueError(f"expected a multi_hop QA pair, got {qa.kind}")
    if len(segs) < 2:
        raise ValueError(f"multi-hop assembly needs >= 2 gold segments, got {len(segs)}")
    gold_tokens = sum(len(s) for s in segs)
    if gold_tokens > target:
        raise AssemblyError(
            f"gold segments ({gold_tokens} tokens) exceed target {target}"
        )
    exclude = frozenset(s.doc_id for s in segs)
    fillers, actual = _draw_fillers(filler_source, rng, exclude, gold_tokens, target)
    items: list[Segment] = list(segs) + fillers
    rng.shuffle(items)

    gold_keys = {(s.doc_id, s.start_token): i for i, s in enumerate(segs)}
    placements: list[tuple[int, float] | None] = [None] * len(segs)
    offset = 0
    for index, item in enumerate(items):
        key = (item.doc_id, item.start_token)
        if key in gold_keys:
            placements[gold_keys[key]] = (index, offset / actual)
        offset += len(item)
    context = SEGMENT_SEPARATOR.join(s.text for s in items)
    _check_template_markers(context, "assembled context")
    return LongContextExample(
        context=context,
        question=qa.question,
        answer=qa.answer,
        kind=KIND_MULTIHOP,
        target_tokens=target,
        actual_tokens=actual,
        gold_placements=tuple(placements),  # type: ignore[arg-type]
        seed=seed,
    )


def make_short_context_example(
    doc: RawDocument, qa: QAPair, tok: Tokenizer, seed: int = 0
) -> LongContextExample:
    """Keep the QA pair with the original document as the whole context."""
    _check_template_markers(doc.text, "document text")
    actual = count_tokens(doc.text, tok)
    return LongContextExample(
        context=doc.text,
        question=qa.question,
        answer=qa.answer,
        kind=KIND_SHORT,
        target_tokens=actual,
        actual_tokens=actual,
        gold_placements=((0, 0.0),),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# training format


TRAIN_INPUT_PREFIX = (
    "[INST] Below is a context and an instruction. "
    "Based on the information provided in the context, "
    "write a response for the instruction.\n\n### Context:\n"
)
TRAIN_INPUT_MID = "\n\n### Instruction:\n"
TRAIN_INPUT_SUFFIX = " [/INST]"


def render_training_input(context: str, instruction: str) -> str:
    return TRAIN_INPUT_PREFIX + context + TRAIN_INPUT_MID + instruction + TRAIN_INPUT_SUFFIX


def format_training_example(ex: LongContextExample) -> tuple[str, str]:
    """Render (input, output) in the instruction-tuning template."""
    _check_template_markers(ex.context, "context")
    _check_template_markers(ex.question, "question")
    return render_training_input(ex.context, ex.question), ex.answer


# ---------------------------------------------------------------------------
# mixture


def allocate_counts(total: int, ratios: dict[str, float]) -> dict[str, int]:
    """Split ``total`` by ``ratios`` with largest-remainder rounding.

    Floors every share first, then hands leftover records to the kinds with
    the largest fractional parts (ties broken by ratio-dict order), so the
    result can differ from exact proportionality by at most one record.
    """
    if total < 0:
        raise ConfigError("total must be non-negative")
    if any(r < 0 for r in ratios.values()):
        raise ConfigError("ratios must be non-negative")
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1.0, got {sum(ratios.values())!r}")
    shares = {k: total * r for k, r in ratios.items()}
    counts = {k: int(s) for k, s in shares.items()}
    leftover = total - sum(counts.values())
    order = sorted(
        ratios.keys(),
        key=lambda k: (-(shares[k] - counts[k]), list(ratios).index(k)),
    )
    for k in order[:leftover]:
        counts[k] += 1
    return counts


def build_mixture(
    sources: dict[str, Callable[[int], LongContextExample]],
    ratios: dict[str, float],
    total: int,
    rng: random.Random,
    seed: int = 0,
    corpus_fingerprints: dict[str, str] | None = None,
    tokenizer_id: str = "",
    jobs: int = 1,
) -> tuple[DatasetManifest, list[LongContextExample]]:
    """Materialize per-kind records and interleave them with a seeded shuffle.

    ``sources`` maps each kind to a callable taking the example index; the
    callable owns its per-index seeding so results do not depend on worker
    scheduling. Kinds with a zero count never call their source, so absent
    sources are fine as long as their ratio is 0.
    """
    counts = allocate_counts(total, ratios)
    for kind, cnt in counts.items():
        if cnt > 0 and kind not in sources:
            raise ConfigError(f"no source supplied for kind {kind!r} (count {cnt})")

    examples: list[LongContextExample] = []
    for kind in ratios:
        cnt = counts[kind]
        if cnt == 0:
            continue
        make = sources[kind]
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                built = list(pool.map(make, range(cnt)))
        else:
            built = [make(i) for i in range(cnt)]
        examples.extend(built)
        logger.info("built %d %s records", cnt, kind)

    rng.shuffle(examples)
    manifest = DatasetManifest(
        counts=counts,
        ratios=dict(ratios),
        seed=seed,
        corpus_fingerprints=dict(corpus_fingerprints or {}),
        tokenizer_id=tokenizer_id,
    )
    return manifest, examples


# ---------------------------------------------------------------------------
# end-to-end dataset build


@dataclass
class InstructionRecord:
    question: str
    answer: str


MAX_EXAMPLE_ATTEMPTS = 10


@dataclass
class DatasetBuild:
    manifest: DatasetManifest
    examples: list[LongContextExample]
    dropped: int = 0


def build_training_dataset(
    docs: Sequence[RawDocument],
    tok: Tokenizer,
    client: GeneratorClient,
    total: int,
    ratios: dict[str, float] | None = None,
    seed: int = 0,
    ngram_index: NgramIndex | None = None,
    instructions: Sequence[InstructionRecord] = (),
    policy: RetryPolicy | None = None,
    corpus_fingerprints: dict[str, str] | None = None,
    jobs: int = 1,
) -> DatasetBuild:
    """Run the full data synthesis: filter, generate QA, assemble, mix.

    Contaminated documents (any n-gram overlap with the index) are blocked
    from both QA-source and filler roles. Failed generations or assemblies
    are dropped and redrawn with a fresh derived seed, up to
    MAX_EXAMPLE_ATTEMPTS per slot, so the emitted counts always match the
    manifest.
    """
    ratios = dict(ratios or DEFAULT_RATIOS)
    policy = policy or RetryPolicy()

    if ngram_index is not None:
        clean_docs = [d for d in docs if not is_contaminated(d.text, ngram_index)]
        logger.info("decontamination kept %d/%d documents", len(clean_docs), len(docs))
    else:
        clean_docs = list(docs)
    if not clean_docs:
        raise ConfigError("no documents left after decontamination")

    pool = FillerPool(clean_docs, tok)
    doc_tokens = {d.id: count_tokens(d.text, tok) for d in clean_docs}
    fine_docs = [d for d in clean_docs if doc_tokens[d.id] >= 128]
    multihop_docs = [d for d in clean_docs if len(split_segments(d, tok)) >= 2]

    counts = allocate_counts(total, ratios)
    if counts.get(KIND_FINE, 0) or counts.get(KIND_SHORT, 0):
        if not fine_docs:
            raise ConfigError("no documents with >= 128 tokens for QA generation")
    if counts.get(KIND_MULTIHOP, 0) and not multihop_docs:
        raise ConfigError("no documents with >= 2 segments for multi-hop generation")
    if counts.get(KIND_GENERAL, 0) > len(instructions):
        raise ConfigError(
            f"need {counts[KIND_GENERAL]} instruction records, got {len(instructions)}"
        )

    dropped = 0
    dropped_lock = threading.Lock()

    def with_attempts(build_one: Callable[[random.Random, int], LongContextExample], tag: str):
        def make(i: int) -> LongContextExample:
            nonlocal dropped
            for attempt in range(MAX_EXAMPLE_ATTEMPTS):
                example_seed = derive_seed(seed, tag, i, attempt)
                rng = random.Random(example_seed)
                try:
                    return build_one(rng, example_seed)
                except (GenerationError, AssemblyError) as exc:
                    with dropped_lock:
                        dropped += 1
                    logger.warning("%s example %d attempt %d dropped: %s", tag, i, attempt, exc)
            raise GenerationError(
                f"{tag} example {i}: every attempt failed (last after "
                f"{MAX_EXAMPLE_ATTEMPTS} tries)"
            )

        return make

    def build_fine(rng: random.Random, example_seed: int) -> LongContextExample:
        doc = fine_docs[rng.randrange(len(fine_docs))]
        seg = extract_random_segment(doc, tok, rng)
        qa = generate_qa(seg, KIND_FINE, client, policy)
        target = sample_target_length(rng)
        return assemble_fine_example(seg, qa, target, pool, rng, seed=example_seed)

    def build_multihop(rng: random.Random, example_seed: int) -> LongContextExample:
        doc = multihop_docs[rng.randrange(len(multihop_docs))]
        segs = split_segments(doc, tok)
        qa = generate_qa(segs, KIND_MULTIHOP, client, policy)
        gold_tokens = sum(len(s) for s in segs)
        target = sample_target_length(rng)
        for _ in range(16):
            if target >= gold_tokens:
                break
            target = sample_target_length(rng)
        else:
            raise AssemblyError(f"document {doc.id!r} too long for any target")
        return assemble_multihop_example(segs, qa, target, pool, rng, seed=example_seed)

    def build_short(rng: random.Random, example_seed: int) -> LongContextExample:
        doc = fine_docs[rng.randrange(len(fine_docs))]
        seg = extract_random_segment(doc, tok, rng)
        qa = generate_qa(seg, KIND_FINE, client, policy)
        return make_short_context_example(doc, qa, tok, seed=example_seed)

    general_order = list(range(len(instructions)))
    random.Random(derive_seed(seed, "general_order")).shuffle(general_order)

    def make_general(i: int) -> LongContextExample:
        rec = instructions[general_order[i]]
        return LongContextExample(
            context="",
            question=rec.question,
            answer=rec.answer,
            kind=KIND_GENERAL,
            target_tokens=0,
            actual_tokens=0,
            gold_placements=(),
            seed=derive_seed(seed, "general", i),
        )

    sources = {
        KIND_FINE: with_attempts(build_fine, "fine"),
        KIND_MULTIHOP: with_attempts(build_multihop, "multihop"),
        KIND_SHORT: with_attempts(build_short, "short"),
        KIND_GENERAL: make_general,
    }
    manifest, examples = build_mixture(
        sources,
        ratios,
        total,
        rng=random.Random(derive_seed(seed, "mixture")),
        seed=seed,
        corpus_fingerprints=corpus_fingerprints,
        tokenizer_id=getattr(tok, "name", tok.__class__.__name__),
        jobs=jobs,
    )
    return DatasetBuild(manifest=manifest, examples=examples, dropped=dropped)


# ---------------------------------------------------------------------------
# serialization


def example_to_record(ex: LongContextExample) -> dict:
    return {
        "kind": ex.kind,
        "context": ex.context,
        "question": ex.question,
        "answer": ex.answer,
        "target_tokens": ex.target_tokens,
        "actual_tokens": ex.actual_tokens,
        "gold_placements": [{"index": i, "depth": d} for i, d in ex.gold_placements],
        "seed": ex.seed,
    }


def example_from_record(record: dict) -> LongContextExample:
    return LongContextExample(
        context=record["context"],
        question=record["question"],
        answer=record["answer"],
        kind=record["kind"],
        target_tokens=record["target_tokens"],
        actual_tokens=record["actual_tokens"],
        gold_placements=tuple(
            (p["index"], p["depth"]) for p in record["gold_placements"]
        ),
        seed=record["seed"],
    )


def write_dataset(examples: Sequence[LongContextExample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), ensure_ascii=False) + "\n")


def write_training_file(examples: Sequence[LongContextExample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            inp, out = format_training_example(ex)
            fh.write(json.dumps({"input": inp, "output": out}, ensure_ascii=False) + "\n")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_instructions(path: str | Path) -> list[InstructionRecord]:
    """Read general-instruction records: JSONL with question/answer fields."""
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            q, a = obj.get("question"), obj.get("answer")
            if not q or not a:
                raise ConfigError(
                    f"instruction record at line {lineno} needs question and answer"
                )
            records.append(InstructionRecord(question=q, answer=a))
    return records


def fingerprint_file(path: str | Path) -> str:
    """sha256 of file bytes; directories hash name+bytes of each file."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for file in sorted(p for p in path.iterdir() if p.is_file()):
            h.update(file.name.encode("utf-8"))
            h.update(file.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()
