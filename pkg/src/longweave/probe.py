"""Construct retrieval probing suites over three context styles.

Each suite holds examples with a ~32K-token context, one gold item placed
at a controlled depth, and an instruction that keys on the gold:

* document: natural-language sentences; the instruction quotes an interior
  piece of one sentence and asks for the whole sentence (the answer has
  words on both sides of the key, so retrieval is bi-directional).
* code: function definitions; the instruction quotes a body line and asks
  for the enclosing function's name (the name precedes the line: backward).
* database: ID/label/description entities; the instruction quotes an ID
  and asks for label and description (they follow the ID: forward).

Fixture generators emit collision-free synthetic sources so suites can be
built and validated hermetically; real sources use the same JSONL schemas.
"""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

from .corpus import count_tokens, make_tokenizer
from .errors import ProbeBuildError, SuiteValidationError
from .util import derive_seed, shuffled_indices

logger = logging.getLogger(__name__)

STYLE_DOCUMENT = "document"
STYLE_CODE = "code"
STYLE_DATABASE = "database"
STYLES = (STYLE_DOCUMENT, STYLE_CODE, STYLE_DATABASE)

# Fixed pairing between context style and retrieval pattern.
STYLE_PATTERN = {
    STYLE_DOCUMENT: "bidirectional",
    STYLE_CODE: "backward",
    STYLE_DATABASE: "forward",
}

DOCUMENT_INSTRUCTION = (
    "A contiguous piece of one sentence from the context is given below. "
    "Find that sentence, and write out the complete sentence containing the piece. "
    "Piece: {piece}"
)
CODE_INSTRUCTION = (
    "A line of code from one of the function definitions in the context is "
    "given below. Find that definition, and answer with the name of the "
    "function it belongs to. Line: {line}"
)
DATABASE_INSTRUCTION = (
    "An entity ID from the context is given below. Find that entity, and "
    "write out its label and its description. ID: {id}"
)

MAX_BUILD_ATTEMPTS = 20


@dataclass(frozen=True)
class ProbeConfig:
    n_examples: int = 3000
    target_tokens: int = 32768
    token_tolerance: float = 0.1
    piece_words: int = 8
    queries_per_function: int = 1
    tokenizer: str = "whitespace"
    document_instruction: str = DOCUMENT_INSTRUCTION
    code_instruction: str = CODE_INSTRUCTION
    database_instruction: str = DATABASE_INSTRUCTION

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class FunctionRecord:
    name: str
    body_lines: tuple[str, ...]


@dataclass(frozen=True)
class EntityRecord:
    id: str
    label: str
    description: str


@dataclass(frozen=True)
class GoldSpec:
    """Gold material for one example; populated fields depend on the style."""

    sentence: str | None = None
    piece: str | None = None
    function_name: str | None = None
    queried_line: str | None = None
    entity_id: str | None = None
    label: str | None = None
    description: str | None = None

    def to_dict(self) -> dict:
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if getattr(self, f.name) is not None
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GoldSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class ProbeExample:
    id: str
    style: str
    pattern: str
    context: str
    instruction: str
    gold: GoldSpec
    gold_depth: float
    context_tokens: int


@dataclass
class ProbeSuite:
    style: str
    examples: list[ProbeExample]
    config: ProbeConfig
    seed: int


def render_function(fn: FunctionRecord) -> str:
    return f"def {fn.name}(value):\n" + "\n".join(f"    {ln}" for ln in fn.body_lines)


def render_entity(e: EntityRecord) -> str:
    return f"ID: {e.id}\nLabel: {e.label}\nDescription: {e.description}"


# ---------------------------------------------------------------------------
# synthetic fixture sources


_CONSONANTS = "bcdfgklmnprstvz"
_VOWELS = "aeiou"


class _Coiner:
    """Mint pseudo-words that are unique by construction (salted counter)."""

    def __init__(self, rng: random.Random):
        self._rng = rng
        self._next = 0

    def word(self) -> str:
        stem = "".join(
            self._rng.choice(_CONSONANTS) + self._rng.choice(_VOWELS) for _ in range(3)
        )
        self._next += 1
        return f"{stem}{self._next}"


def synth_fixture_material(style: str, n: int, rng: random.Random):
    """Generate n collision-free synthetic source records for a style."""
    coiner = _Coiner(rng)
    if style == STYLE_DOCUMENT:
        return [
            f"Sentence {k} mentions {coiner.word()} near {coiner.word()} "
            f"and also links {coiner.word()} with {coiner.word()} today."
            for k in range(1, n + 1)
        ]
    if style == STYLE_CODE:
        records = []
        for _ in range(n):
            name = f"compute_{coiner.word()}"
            a, b, c = coiner.word(), coiner.word(), coiner.word()
            records.append(
                FunctionRecord(
                    name=name,
                    body_lines=(
                        f"{a} = value * {rng.randint(2, 9)}",
                        f"{b} = {a} + {rng.randint(10, 99)}",
                        f"{c} = {b} - value",
                        f"return {c}",
                    ),
                )
            )
        return records
    if style == STYLE_DATABASE:
        return [
            EntityRecord(
                id=f"Q{100000 + k}",
                label=coiner.word(),
                description=f"the {coiner.word()} {coiner.word()} kept beside the {coiner.word()}",
            )
            for k in range(1, n + 1)
        ]
    raise ValueError(f"unknown probe style {style!r}")


# ---------------------------------------------------------------------------
# construction helpers


class _Resample(Exception):
    """Internal: this draw collided, try the example again."""


def _identifier_pattern(token: str) -> re.Pattern:
    return re.compile(rf"(?<![A-Za-z0-9_]){re.escape(token)}(?![A-Za-z0-9_])")


def _count_token(text: str, token: str) -> int:
    return len(_identifier_pattern(token).findall(text))


def _find_token(text: str, token: str) -> int:
    m = _identifier_pattern(token).search(text)
    return m.start() if m else -1


def _insertion_point(u: float, filler_lens: Sequence[int]) -> tuple[int, int]:
    """Index among fillers and token offset matching relative depth u."""
    want = u * sum(filler_lens)
    cum = 0
    for pos, ln in enumerate(filler_lens):
        if cum >= want:
            return pos, cum
        cum += ln
    return len(filler_lens), cum


def _build_suite(
    style: str,
    cfg: ProbeConfig,
    master: int,
    build_one: Callable[[random.Random, int], ProbeExample],
    jobs: int = 1,
) -> ProbeSuite:
    def make(i: int) -> ProbeExample:
        last = None
        for attempt in range(MAX_BUILD_ATTEMPTS):
            r = random.Random(derive_seed(master, style, i, attempt))
            try:
                ex = build_one(r, i)
            except _Resample as exc:
                last = exc
                continue
            validate_example(ex, cfg)
            return ex
        raise ProbeBuildError(f"{style} example {i}: kept colliding ({last})")

    indices = range(cfg.n_examples)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            examples = list(pool.map(make, indices))
    else:
        examples = [make(i) for i in indices]
    return ProbeSuite(style=style, examples=examples, config=cfg, seed=master)


def build_document_suite(
    sentences: list[str], cfg: ProbeConfig, rng: random.Random, jobs: int = 1
) -> ProbeSuite:
    """Sentence-retrieval suite: quote an interior piece, expect the sentence."""
    if len(sentences) < 2:
        raise ProbeBuildError("sentence pool needs at least 2 sentences")
    tok = make_tokenizer(cfg.tokenizer)
    sent_tokens = [count_tokens(s, tok) for s in sentences]
    n_pool = len(sentences)
    # the gold must host a strictly interior piece: piece_words + 2 words
    gold_eligible = [
        i for i, s in enumerate(sentences) if len(s.split()) >= cfg.piece_words + 2
    ]
    if not gold_eligible:
        raise ProbeBuildError(
            f"no sentence has >= {cfg.piece_words + 2} words to host an interior piece"
        )
    master = rng.getrandbits(64)

    def build_one(r: random.Random, i: int) -> ProbeExample:
        gold_idx = gold_eligible[r.randrange(len(gold_eligible))]
        gold = sentences[gold_idx]
        words = gold.split()
        start = r.randint(1, len(words) - cfg.piece_words - 1)
        piece = " ".join(words[start : start + cfg.piece_words])

        gold_tok = sent_tokens[gold_idx]
        cap = int(cfg.target_tokens * (1 + cfg.token_tolerance))
        filler_idx: list[int] = []
        ftotal = 0
        skips = 0
        while ftotal + gold_tok < cfg.target_tokens:
            j = r.randrange(n_pool)
            if j == gold_idx:
                continue
            if ftotal + gold_tok + sent_tokens[j] > cap:
                skips += 1
                if skips > 1000:
                    raise ProbeBuildError(
                        "no filler sentence fits within the token tolerance"
                    )
                continue
            filler_idx.append(j)
            ftotal += sent_tokens[j]
        u = r.random()
        k, offset = _insertion_point(u, [sent_tokens[j] for j in filler_idx])
        total = ftotal + gold_tok
        parts = [sentences[j] for j in filler_idx[:k]] + [gold] + [
            sentences[j] for j in filler_idx[k:]
        ]
        context = " ".join(parts)
        if context.count(piece) != 1 or context.count(gold) != 1:
            raise _Resample("piece or gold sentence not unique in context")
        return ProbeExample(
            id=f"{STYLE_DOCUMENT}-{i:05d}",
            style=STYLE_DOCUMENT,
            pattern=STYLE_PATTERN[STYLE_DOCUMENT],
            context=context,
            instruction=cfg.document_instruction.replace("{piece}", piece),
            gold=GoldSpec(sentence=gold, piece=piece),
            gold_depth=offset / total,
            context_tokens=total,
        )

    return _build_suite(STYLE_DOCUMENT, cfg, master, build_one, jobs)


def build_code_suite(
    functions: list[FunctionRecord], cfg: ProbeConfig, rng: random.Random, jobs: int = 1
) -> ProbeSuite:
    """Function-name retrieval: quote a body line, expect the name.

    Queried lines come from each function's first three body lines, minus
    any line containing the function's own name (those would leak the
    answer and stop being backward retrieval). Functions with fewer than 3
    body lines are skipped.
    """
    eligible: list[FunctionRecord] = []
    query_pools: list[list[str]] = []
    for fn in functions:
        if len(fn.body_lines) < 3 or not fn.name:
            continue
        pool = [ln for ln in fn.body_lines[:3] if fn.name not in ln]
        if not pool:
            continue
        eligible.append(fn)
        query_pools.append(pool)
    if len(eligible) < 2:
        raise ProbeBuildError("need at least 2 usable functions")

    tok = make_tokenizer(cfg.tokenizer)
    rendered = [render_function(fn) for fn in eligible]
    fn_tokens = [count_tokens(t, tok) for t in rendered]
    n_pool = len(eligible)
    q = max(1, cfg.queries_per_function)
    master = rng.getrandbits(64)

    def build_one(r: random.Random, i: int) -> ProbeExample:
        if q == 1:
            gold_i = r.randrange(n_pool)
            line = query_pools[gold_i][r.randrange(len(query_pools[gold_i]))]
        else:
            # All q queries in a group key on one function, cycling its lines.
            gold_i = random.Random(derive_seed(master, "fn-group", i // q)).randrange(n_pool)
            pool = query_pools[gold_i]
            line = pool[(i % q) % len(pool)]
        gold_fn = eligible[gold_i]

        filler_idx: list[int] = []
        used_names = {gold_fn.name}
        ftotal = 0
        gold_tok = fn_tokens[gold_i]
        cap = int(cfg.target_tokens * (1 + cfg.token_tolerance))
        for j in shuffled_indices(r, n_pool):
            if ftotal + gold_tok >= cfg.target_tokens:
                break
            if j == gold_i or eligible[j].name in used_names:
                continue
            if ftotal + gold_tok + fn_tokens[j] > cap:
                continue
            used_names.add(eligible[j].name)
            filler_idx.append(j)
            ftotal += fn_tokens[j]
        if ftotal + gold_tok < cfg.target_tokens:
            raise ProbeBuildError(
                f"function pool too small to reach {cfg.target_tokens} tokens"
            )
        u = r.random()
        k, offset = _insertion_point(u, [fn_tokens[j] for j in filler_idx])
        total = ftotal + gold_tok
        parts = [rendered[j] for j in filler_idx[:k]] + [rendered[gold_i]] + [
            rendered[j] for j in filler_idx[k:]
        ]
        context = "\n\n".join(parts)
        if _count_line(context, line) != 1 or _count_token(context, gold_fn.name) != 1:
            raise _Resample("queried line or function name not unique in context")
        return ProbeExample(
            id=f"{STYLE_CODE}-{i:05d}",
            style=STYLE_CODE,
            pattern=STYLE_PATTERN[STYLE_CODE],
            context=context,
            instruction=cfg.code_instruction.replace("{line}", line),
            gold=GoldSpec(function_name=gold_fn.name, queried_line=line),
            gold_depth=offset / total,
            context_tokens=total,
        )

    return _build_suite(STYLE_CODE, cfg, master, build_one, jobs)


def build_database_suite(
    entities: list[EntityRecord], cfg: ProbeConfig, rng: random.Random, jobs: int = 1
) -> ProbeSuite:
    """Entity retrieval: quote an ID, expect its label and description."""
    if len(entities) < 2:
        raise ProbeBuildError("need at least 2 entities")
    tok = make_tokenizer(cfg.tokenizer)
    rendered = [render_entity(e) for e in entities]
    ent_tokens = [count_tokens(t, tok) for t in rendered]
    n_pool = len(entities)
    master = rng.getrandbits(64)

    def build_one(r: random.Random, i: int) -> ProbeExample:
        gold_i = r.randrange(n_pool)
        gold = entities[gold_i]

        filler_idx: list[int] = []
        used_ids = {gold.id}
        ftotal = 0
        gold_tok = ent_tokens[gold_i]
        cap = int(cfg.target_tokens * (1 + cfg.token_tolerance))
        for j in shuffled_indices(r, n_pool):
            if ftotal + gold_tok >= cfg.target_tokens:
                break
            if j == gold_i or entities[j].id in used_ids:
                continue
            if ftotal + gold_tok + ent_tokens[j] > cap:
                continue
            used_ids.add(entities[j].id)
            filler_idx.append(j)
            ftotal += ent_tokens[j]
        if ftotal + gold_tok < cfg.target_tokens:
            raise ProbeBuildError(
                f"entity pool too small to reach {cfg.target_tokens} tokens"
            )
        u = r.random()
        k, offset = _insertion_point(u, [ent_tokens[j] for j in filler_idx])
        total = ftotal + gold_tok
        parts = [rendered[j] for j in filler_idx[:k]] + [rendered[gold_i]] + [
            rendered[j] for j in filler_idx[k:]
        ]
        context = "\n\n".join(parts)
        if (
            _count_token(context, gold.id) != 1
            or context.count(gold.label) != 1
            or context.count(gold.description) != 1
        ):
            raise _Resample("gold id, label, or description not unique in context")
        return ProbeExample(
            id=f"{STYLE_DATABASE}-{i:05d}",
            style=STYLE_DATABASE,
            pattern=STYLE_PATTERN[STYLE_DATABASE],
            context=context,
            instruction=cfg.database_instruction.replace("{id}", gold.id),
            gold=GoldSpec(entity_id=gold.id, label=gold.label, description=gold.description),
            gold_depth=offset / total,
            context_tokens=total,
        )

    return _build_suite(STYLE_DATABASE, cfg, master, build_one, jobs)


def _count_line(context: str, line: str) -> int:
    return sum(1 for ln in context.split("\n") if ln.strip() == line)


def build_suite(
    style: str, source, cfg: ProbeConfig, rng: random.Random, jobs: int = 1
) -> ProbeSuite:
    builders = {
        STYLE_DOCUMENT: build_document_suite,
        STYLE_CODE: build_code_suite,
        STYLE_DATABASE: build_database_suite,
    }
    try:
        builder = builders[style]
    except KeyError:
        raise ProbeBuildError(f"unknown probe style {style!r}")
    return builder(source, cfg, rng, jobs=jobs)


# ---------------------------------------------------------------------------
# validation


def validate_example(ex: ProbeExample, cfg: ProbeConfig) -> None:
    """Check every per-example invariant; raise naming the violated one."""

    def fail(invariant: str) -> None:
        raise SuiteValidationError(f"example {ex.id}: {invariant}")

    if ex.style not in STYLES:
        fail(f"unknown style {ex.style!r}")
    if ex.pattern != STYLE_PATTERN[ex.style]:
        fail(
            f"style/pattern pairing violated: {ex.style} must be "
            f"{STYLE_PATTERN[ex.style]}, got {ex.pattern}"
        )
    if not 0.0 <= ex.gold_depth <= 1.0:
        fail(f"gold_depth {ex.gold_depth} outside [0, 1]")
    lo = (1 - cfg.token_tolerance) * cfg.target_tokens
    hi = (1 + cfg.token_tolerance) * cfg.target_tokens
    if not lo <= ex.context_tokens <= hi:
        fail(
            f"context_tokens {ex.context_tokens} outside tolerance "
            f"[{lo:.0f}, {hi:.0f}] around target {cfg.target_tokens}"
        )

    g = ex.gold
    if ex.style == STYLE_DOCUMENT:
        if not g.sentence or not g.piece:
            fail("gold is missing sentence or piece")
        if ex.context.count(g.sentence) != 1:
            fail("gold sentence does not occur exactly once in context")
        if ex.context.count(g.piece) != 1:
            fail("query piece does not occur exactly once in context")
        at = g.sentence.find(g.piece)
        if at < 0:
            fail("query piece is not inside the gold sentence")
        if not g.sentence[:at].strip() or not g.sentence[at + len(g.piece) :].strip():
            fail("query piece is not strictly interior to the gold sentence")
    elif ex.style == STYLE_CODE:
        if not g.function_name or not g.queried_line:
            fail("gold is missing function_name or queried_line")
        if _count_token(ex.context, g.function_name) != 1:
            fail("function name does not occur exactly once in context")
        if _count_line(ex.context, g.queried_line) != 1:
            fail("queried line does not occur exactly once in context")
        if g.function_name in g.queried_line:
            fail("queried line contains the function name")
        name_at = _find_token(ex.context, g.function_name)
        line_at = _find_line(ex.context, g.queried_line)
        if not (0 <= name_at < line_at):
            fail("backward pattern violated: name must precede the queried line")
    elif ex.style == STYLE_DATABASE:
        if not g.entity_id or not g.label or not g.description:
            fail("gold is missing entity_id, label, or description")
        if _count_token(ex.context, g.entity_id) != 1:
            fail("entity id does not occur exactly once in context")
        if ex.context.count(g.label) != 1:
            fail("label does not occur exactly once in context")
        if ex.context.count(g.description) != 1:
            fail("description does not occur exactly once in context")
        id_at = _find_token(ex.context, g.entity_id)
        if not (ex.context.find(g.label) > id_at and ex.context.find(g.description) > id_at):
            fail("forward pattern violated: label/description must follow the id")


def _find_line(context: str, line: str) -> int:
    offset = 0
    for ln in context.split("\n"):
        if ln.strip() == line:
            return offset + len(ln) - len(ln.lstrip())
        offset += len(ln) + 1
    return -1


def validate_suite(suite: ProbeSuite) -> None:
    for ex in suite.examples:
        validate_example(ex, suite.config)


# ---------------------------------------------------------------------------
# serialization


def export_suite(suite: ProbeSuite, path: str | Path) -> None:
    """Write one meta line then one JSON object per example."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        meta = {
            "meta": {
                "style": suite.style,
                "seed": suite.seed,
                "config": suite.config.to_dict(),
                "n_examples": len(suite.examples),
            }
        }
        fh.write(json.dumps(meta, ensure_ascii=False) + "\n")
        for ex in suite.examples:
            record = {
                "id": ex.id,
                "style": ex.style,
                "pattern": ex.pattern,
                "context": ex.context,
                "instruction": ex.instruction,
                "gold": ex.gold.to_dict(),
                "gold_depth": ex.gold_depth,
                "context_tokens": ex.context_tokens,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


_EXAMPLE_FIELDS = (
    "id",
    "style",
    "pattern",
    "context",
    "instruction",
    "gold",
    "gold_depth",
    "context_tokens",
)


def load_suite(path: str | Path) -> ProbeSuite:
    """Read a suite back and re-validate every example invariant."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline()
        try:
            meta = json.loads(header)["meta"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise SuiteValidationError(f"{path}: missing or malformed meta line") from exc
        cfg = ProbeConfig.from_dict(meta.get("config", {}))
        examples: list[ProbeExample] = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            record = json.loads(line)
            missing = [k for k in _EXAMPLE_FIELDS if k not in record]
            if missing:
                raise SuiteValidationError(
                    f"{path}:{lineno}: example record missing fields {missing}"
                )
            ex = ProbeExample(
                id=record["id"],
                style=record["style"],
                pattern=record["pattern"],
                context=record["context"],
                instruction=record["instruction"],
                gold=GoldSpec.from_dict(record["gold"]),
                gold_depth=record["gold_depth"],
                context_tokens=record["context_tokens"],
            )
            validate_example(ex, cfg)
            examples.append(ex)
    suite = ProbeSuite(
        style=meta["style"], examples=examples, config=cfg, seed=meta["seed"]
    )
    return suite


# ---------------------------------------------------------------------------
# source loading and decontamination references


def load_sentences(path: str | Path) -> list[str]:
    return [r["text"] for r in _read_jsonl(path)]


def load_functions(path: str | Path) -> list[FunctionRecord]:
    return [
        FunctionRecord(name=r["name"], body_lines=tuple(r["body_lines"]))
        for r in _read_jsonl(path)
    ]


def load_entities(path: str | Path) -> list[EntityRecord]:
    return [
        EntityRecord(id=r["id"], label=r["label"], description=r["description"])
        for r in _read_jsonl(path)
    ]


def _read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def source_reference_texts(style: str, source) -> list[str]:
    """Serialize probe source records for the n-gram decontamination filter.

    Any source record can end up in an evaluation context (gold or filler),
    so the whole pool is exported, not just the golds.
    """
    if style == STYLE_DOCUMENT:
        return list(source)
    if style == STYLE_CODE:
        return [render_function(fn) for fn in source]
    if style == STYLE_DATABASE:
        return [render_entity(e) for e in source]
    raise ValueError(f"unknown probe style {style!r}")
