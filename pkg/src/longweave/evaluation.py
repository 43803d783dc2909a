"""Run probe suites against a responder, score, bucket by depth, report.

Scoring uses one metric per context style: word-level recall for document
retrieval, whole-token exact match for code function names, and relaxed
exact match (label or description as a normalized substring) for database
entities. Per-example scores are bucketed by the gold item's relative
depth; a report carries the overall average plus the max-min gap across
bucket means, which measures positional robustness.

Oracle and empty responders make every run reproducible offline.
"""

from __future__ import annotations

import json
import logging
import math
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .decontam import normalize_words
from .errors import EvalError, GenerationError
from .probe import (
    STYLE_CODE,
    STYLE_DATABASE,
    STYLE_DOCUMENT,
    ProbeExample,
    ProbeSuite,
)
from .qagen import GeneratorClient, RetryPolicy, call_with_retries
from .synth import render_training_input

logger = logging.getLogger(__name__)

DEFAULT_N_BUCKETS = 50


@dataclass(frozen=True)
class ResponseRecord:
    example_id: str
    raw_response: str
    latency_ms: int
    error: str | None = None


@dataclass(frozen=True)
class BucketStat:
    lo: float
    hi: float
    mean: float | None  # None when the bucket is empty
    count: int


@dataclass
class ScoreReport:
    style: str
    per_example: list[tuple[str, float, float]]  # (example_id, gold_depth, score)
    buckets: list[BucketStat]
    avg: float  # fraction in [0, 1]
    gap: float  # fraction in [0, 1]
    n_buckets: int
    error_rate: float


# ---------------------------------------------------------------------------
# scorers


def score_recall(gold_sentence: str, response: str) -> float:
    """Word-level recall of the gold sentence inside the response.

    Both sides are lowercased, whitespace-split, and stripped of edge
    punctuation; the overlap is a multiset intersection, so repeated gold
    words must be repeated in the response to count twice.
    """
    gold_words = normalize_words(gold_sentence)
    if not gold_words:
        return 0.0
    overlap = Counter(gold_words) & Counter(normalize_words(response))
    return sum(overlap.values()) / len(gold_words)


def score_exact_match(gold_name: str, response: str, strict: bool = False) -> int:
    """1 iff the name occurs as a whole identifier token, case-sensitive.

    Token boundaries are non-identifier characters, so "run" never matches
    inside "rerun". ``strict`` switches to whole-response equality.
    """
    if strict:
        return int(response.strip() == gold_name)
    pattern = rf"(?<![A-Za-z0-9_]){re.escape(gold_name)}(?![A-Za-z0-9_])"
    return int(re.search(pattern, response) is not None)


def score_relaxed_em(label: str, description: str, response: str) -> int:
    """1 iff the label or the description appears verbatim in the response.

    Matching is case-insensitive with whitespace runs collapsed; anything
    short of a contiguous substring (a paraphrase) scores 0.
    """

    def norm(s: str) -> str:
        return " ".join(s.lower().split())

    r = norm(response)
    lab, desc = norm(label), norm(description)
    return int(bool(lab) and lab in r or bool(desc) and desc in r)


def score_example(ex: ProbeExample, response: str, strict_em: bool = False) -> float:
    if ex.style == STYLE_DOCUMENT:
        return score_recall(ex.gold.sentence or "", response)
    if ex.style == STYLE_CODE:
        return float(score_exact_match(ex.gold.function_name or "", response, strict_em))
    if ex.style == STYLE_DATABASE:
        return float(
            score_relaxed_em(ex.gold.label or "", ex.gold.description or "", response)
        )
    raise EvalError(f"cannot score unknown style {ex.style!r}")


# ---------------------------------------------------------------------------
# bucketing and summary statistics


def bucketize(
    per_example: Sequence[tuple[str, float, float]], n_buckets: int
) -> list[BucketStat]:
    """Partition [0, 1] into n even depth buckets; the last one is closed."""
    if n_buckets < 2:
        raise EvalError("n_buckets must be >= 2 (the gap is undefined otherwise)")
    scores: list[list[float]] = [[] for _ in range(n_buckets)]
    for _id, depth, score in per_example:
        if not 0.0 <= depth <= 1.0:
            raise EvalError(f"gold_depth {depth} outside [0, 1] for example {_id}")
        k = min(int(depth * n_buckets), n_buckets - 1)
        scores[k].append(score)
    # fsum is exactly rounded, so bucket means do not depend on example order
    return [
        BucketStat(
            lo=k / n_buckets,
            hi=(k + 1) / n_buckets,
            mean=(math.fsum(scores[k]) / len(scores[k])) if scores[k] else None,
            count=len(scores[k]),
        )
        for k in range(n_buckets)
    ]


def compute_avg_gap(
    buckets: Sequence[BucketStat], per_example: Sequence[tuple[str, float, float]]
) -> tuple[float, float]:
    """Overall mean score and max-min spread of non-empty bucket means.

    Empty buckets are a coverage defect reported via their zero counts;
    they never contribute to the gap.
    """
    nonempty = [b.mean for b in buckets if b.count > 0]
    if len(nonempty) < 2:
        raise EvalError(f"need >= 2 non-empty buckets, got {len(nonempty)}")
    if not per_example:
        raise EvalError("no per-example scores")
    avg = math.fsum(score for _, _, score in per_example) / len(per_example)
    gap = max(nonempty) - min(nonempty)
    return avg, gap


def score_suite(
    suite: ProbeSuite,
    responses: Iterable[ResponseRecord],
    n_buckets: int = DEFAULT_N_BUCKETS,
    strict_em: bool = False,
) -> ScoreReport:
    """Join responses to examples by id and aggregate.

    Missing or errored responses score 0 instead of being dropped, so the
    average reflects operational reliability; error_rate reports them
    separately.
    """
    by_id = {r.example_id: r for r in responses}
    per_example: list[tuple[str, float, float]] = []
    errors = 0
    for ex in suite.examples:
        rec = by_id.get(ex.id)
        if rec is None or rec.error:
            errors += 1
            score = 0.0
        else:
            score = score_example(ex, rec.raw_response, strict_em)
        per_example.append((ex.id, ex.gold_depth, score))
    buckets = bucketize(per_example, n_buckets)
    avg, gap = compute_avg_gap(buckets, per_example)
    return ScoreReport(
        style=suite.style,
        per_example=per_example,
        buckets=buckets,
        avg=avg,
        gap=gap,
        n_buckets=n_buckets,
        error_rate=errors / len(suite.examples) if suite.examples else 0.0,
    )


# ---------------------------------------------------------------------------
# responders and the probe runner


def render_probe_prompt(ex: ProbeExample) -> str:
    """Probe prompts reuse the training template so evaluated models see
    the same context/instruction framing the trained model was tuned on."""
    return render_training_input(ex.context, ex.instruction)


def gold_answer_text(ex: ProbeExample) -> str:
    if ex.style == STYLE_DOCUMENT:
        return ex.gold.sentence or ""
    if ex.style == STYLE_CODE:
        return ex.gold.function_name or ""
    if ex.style == STYLE_DATABASE:
        return f"Label: {ex.gold.label}\nDescription: {ex.gold.description}"
    raise EvalError(f"unknown style {ex.style!r}")


class OracleResponder:
    """Answers every prompt with the gold text; scores 100 by construction."""

    def __init__(self, suites: ProbeSuite | Sequence[ProbeSuite]):
        if isinstance(suites, ProbeSuite):
            suites = [suites]
        self._answers = {
            render_probe_prompt(ex): gold_answer_text(ex)
            for suite in suites
            for ex in suite.examples
        }

    def complete(self, prompt: str) -> str:
        try:
            return self._answers[prompt]
        except KeyError:
            raise EvalError("oracle responder got a prompt from an unknown suite")


class EmptyResponder:
    def complete(self, prompt: str) -> str:
        return ""


def run_probe(
    suite: ProbeSuite,
    responder: GeneratorClient,
    out_path: str | Path | None = None,
    concurrency: int = 1,
    policy: RetryPolicy | None = None,
) -> list[ResponseRecord]:
    """Collect one response per example, resumably.

    Existing records at ``out_path`` are honored (their examples are never
    queried again) and new records are appended in example order as they
    complete. Per-example transport failures become error records; only
    programming errors abort the run.
    """
    policy = policy or RetryPolicy()
    existing: dict[str, ResponseRecord] = {}
    out_file = None
    if out_path is not None:
        out_path = Path(out_path)
        if out_path.exists():
            existing = {r.example_id: r for r in read_responses(out_path)}
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_file = out_path.open("a", encoding="utf-8")

    pending = [ex for ex in suite.examples if ex.id not in existing]
    logger.info(
        "running %s suite: %d examples (%d resumed)",
        suite.style,
        len(suite.examples),
        len(existing),
    )

    def work(ex: ProbeExample) -> ResponseRecord:
        prompt = render_probe_prompt(ex)
        start = time.monotonic()
        error = None
        text = ""
        try:
            text = call_with_retries(responder, prompt, policy)
        except (GenerationError, EvalError) as exc:
            error = str(exc)
        latency = int((time.monotonic() - start) * 1000)
        return ResponseRecord(
            example_id=ex.id, raw_response=text, latency_ms=latency, error=error
        )

    try:
        if concurrency > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                completed = pool.map(work, pending)
                new_records = _persist_stream(completed, out_file)
        else:
            new_records = _persist_stream((work(ex) for ex in pending), out_file)
    finally:
        if out_file is not None:
            out_file.close()

    by_id = dict(existing)
    by_id.update({r.example_id: r for r in new_records})
    return [by_id[ex.id] for ex in suite.examples]


def _persist_stream(records: Iterable[ResponseRecord], out_file) -> list[ResponseRecord]:
    collected = []
    for rec in records:
        if out_file is not None:
            out_file.write(json.dumps(_response_to_dict(rec), ensure_ascii=False) + "\n")
            out_file.flush()
        collected.append(rec)
    return collected


def _response_to_dict(rec: ResponseRecord) -> dict:
    d = {
        "example_id": rec.example_id,
        "raw_response": rec.raw_response,
        "latency_ms": rec.latency_ms,
    }
    if rec.error is not None:
        d["error"] = rec.error
    return d


def read_responses(path: str | Path) -> list[ResponseRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(
                ResponseRecord(
                    example_id=d["example_id"],
                    raw_response=d.get("raw_response", ""),
                    latency_ms=d.get("latency_ms", 0),
                    error=d.get("error"),
                )
            )
    return records


# ---------------------------------------------------------------------------
# reporting


@dataclass
class RenderedReport:
    table: str
    summary: dict
    curve_csv: str


def render_report(reports: Sequence[ScoreReport]) -> RenderedReport:
    """Summarize per-style Avg/Gap plus an 'All' row (unweighted mean).

    Scores are presented on a 0-100 scale with one decimal. The curve CSV
    carries one row per bucket per style for plotting position curves.
    """
    if not reports:
        raise EvalError("no score reports to render")
    styles = {}
    for rep in reports:
        styles[rep.style] = {
            "avg": round(rep.avg * 100, 1),
            "gap": round(rep.gap * 100, 1),
            "count": len(rep.per_example),
            "error_rate": round(rep.error_rate, 4),
        }
    all_avg = round(sum(r.avg for r in reports) / len(reports) * 100, 1)
    all_gap = round(sum(r.gap for r in reports) / len(reports) * 100, 1)
    summary = {"styles": styles, "all": {"avg": all_avg, "gap": all_gap}}

    lines = [f"{'Style':<10} {'Count':>6} {'Avg':>6} {'Gap':>6}"]
    for style, row in styles.items():
        lines.append(
            f"{style:<10} {row['count']:>6} {row['avg']:>6.1f} {row['gap']:>6.1f}"
        )
    lines.append(f"{'All':<10} {'':>6} {all_avg:>6.1f} {all_gap:>6.1f}")
    table = "\n".join(lines) + "\n"

    csv_lines = ["style,bucket_lo,bucket_hi,mean_score,count"]
    for rep in reports:
        for b in rep.buckets:
            mean = "" if b.mean is None else f"{b.mean:.6f}"
            csv_lines.append(f"{rep.style},{b.lo:.4f},{b.hi:.4f},{mean},{b.count}")
    curve_csv = "\n".join(csv_lines) + "\n"

    return RenderedReport(table=table, summary=summary, curve_csv=curve_csv)


def report_to_dict(rep: ScoreReport) -> dict:
    return {
        "style": rep.style,
        "n_buckets": rep.n_buckets,
        "avg": rep.avg,
        "gap": rep.gap,
        "error_rate": rep.error_rate,
        "buckets": [
            {"lo": b.lo, "hi": b.hi, "mean": b.mean, "count": b.count}
            for b in rep.buckets
        ],
        "per_example": [
            {"id": i, "depth": d, "score": s} for i, d, s in rep.per_example
        ],
    }


def report_from_dict(d: dict) -> ScoreReport:
    return ScoreReport(
        style=d["style"],
        per_example=[(p["id"], p["depth"], p["score"]) for p in d["per_example"]],
        buckets=[
            BucketStat(lo=b["lo"], hi=b["hi"], mean=b["mean"], count=b["count"])
            for b in d["buckets"]
        ],
        avg=d["avg"],
        gap=d["gap"],
        n_buckets=d["n_buckets"],
        error_rate=d["error_rate"],
    )
