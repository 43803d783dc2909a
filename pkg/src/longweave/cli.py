"""Command-line front door for the pipeline stages.

Subcommands: build-train-data, build-probe, evaluate, score, report.
Config precedence is CLI flags > --config JSON file > defaults, and every
run persists the resolved configuration plus a stage log into the output
directory. Progress goes to stderr; data only ever goes to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

from . import decontam, evaluation, probe, synth
from .corpus import load_corpus, make_tokenizer
from .errors import (
    AssemblyError,
    ConfigError,
    CorpusError,
    DecontamError,
    EvalError,
    GenerationError,
    ParseError,
    ProbeBuildError,
    SuiteValidationError,
    ToolkitError,
    TransportError,
)
from .qagen import MockGeneratorClient, RemoteGeneratorClient

logger = logging.getLogger("longweave")

# Most specific classes first; first isinstance match wins.
EXIT_CODES = [
    (ConfigError, 2),
    (CorpusError, 3),
    (DecontamError, 4),
    (ParseError, 5),
    (TransportError, 5),
    (GenerationError, 5),
    (AssemblyError, 6),
    (ProbeBuildError, 7),
    (SuiteValidationError, 7),
    (EvalError, 8),
]


def _exit_code(exc: ToolkitError) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _setup_run(out_dir: Path, verbose: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger("longweave")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(stream)
    filelog = logging.FileHandler(out_dir / "stage.log", encoding="utf-8")
    filelog.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    root.addHandler(filelog)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config


def _resolve(args: argparse.Namespace, config: dict, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    payload = {"command": command, **resolved}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _make_generator(resolved: dict):
    kind = resolved["generator"]
    if kind == "mock":
        return MockGeneratorClient(seed=resolved["seed"])
    if kind == "remote":
        if not resolved.get("endpoint"):
            raise ConfigError("--endpoint is required with --generator remote")
        return RemoteGeneratorClient(
            endpoint=resolved["endpoint"],
            auth_env=resolved.get("auth_env"),
            rpm=resolved.get("rpm"),
            max_tokens=resolved.get("max_tokens", 1024),
        )
    raise ConfigError(f"unknown generator {kind!r}")


# ---------------------------------------------------------------------------
# build-train-data


def cmd_build_train_data(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    out_dir = Path(_resolve(args, config, "out") or _fail("--out is required"))
    _setup_run(out_dir, args.verbose)

    resolved = {
        "corpus": _resolve(args, config, "corpus") or [],
        "corpus_format": _resolve(args, config, "corpus_format", "jsonl"),
        "eval_refs": _resolve(args, config, "eval_refs") or [],
        "no_decontam": bool(_resolve(args, config, "no_decontam", False)),
        "ngram_size": int(_resolve(args, config, "ngram_size", decontam.DEFAULT_NGRAM_SIZE)),
        "total": int(_resolve(args, config, "total") or _fail("--total is required")),
        "ratios": _resolve(args, config, "ratios"),
        "instructions": _resolve(args, config, "instructions"),
        "generator": _resolve(args, config, "generator", "mock"),
        "endpoint": _resolve(args, config, "endpoint"),
        "auth_env": _resolve(args, config, "auth_env"),
        "rpm": _resolve(args, config, "rpm"),
        "tokenizer": _resolve(args, config, "tokenizer", "whitespace"),
        "seed": int(_resolve(args, config, "seed", 0)),
        "jobs": int(_resolve(args, config, "jobs", 1)),
        "skip_malformed": bool(_resolve(args, config, "skip_malformed", False)),
        "emit_training": bool(_resolve(args, config, "emit_training", False)),
        "out": str(out_dir),
    }
    if not resolved["corpus"]:
        raise ConfigError("at least one --corpus path is required")
    if not resolved["eval_refs"] and not resolved["no_decontam"]:
        raise ConfigError(
            "refusing to build without decontamination references; "
            "pass --eval-refs or explicitly waive with --no-decontam"
        )
    _write_resolved(out_dir, "build-train-data", resolved)

    ratios = _parse_ratios(resolved["ratios"])
    tok = make_tokenizer(resolved["tokenizer"])

    docs = []
    fingerprints = {}
    for cpath in resolved["corpus"]:
        docs.extend(
            load_corpus(
                cpath, resolved["corpus_format"], skip_malformed=resolved["skip_malformed"]
            )
        )
        fingerprints[str(cpath)] = synth.fingerprint_file(cpath)
    logger.info("loaded %d documents from %d corpus path(s)", len(docs), len(fingerprints))

    index = None
    if resolved["eval_refs"]:
        refs = decontam.load_reference_texts(resolved["eval_refs"])
        index = decontam.build_ngram_index(refs, n=resolved["ngram_size"])
        logger.info("built %d-gram index over %d reference texts", index.n, len(refs))

    instructions = []
    if resolved["instructions"]:
        instructions = synth.load_instructions(resolved["instructions"])

    client = _make_generator(resolved)
    build = synth.build_training_dataset(
        docs,
        tok,
        client,
        total=resolved["total"],
        ratios=ratios,
        seed=resolved["seed"],
        ngram_index=index,
        instructions=instructions,
        corpus_fingerprints=fingerprints,
        jobs=resolved["jobs"],
    )

    synth.write_dataset(build.examples, out_dir / "dataset.jsonl")
    synth.write_manifest(build.manifest, out_dir / "manifest.json")
    if resolved["emit_training"]:
        synth.write_training_file(build.examples, out_dir / "training.jsonl")
    logger.info(
        "wrote %d records (dropped %d attempts); counts: %s",
        len(build.examples),
        build.dropped,
        build.manifest.counts,
    )
    return 0


def _parse_ratios(spec) -> dict[str, float]:
    if spec is None:
        return dict(synth.DEFAULT_RATIOS)
    if isinstance(spec, dict):
        return {k: float(v) for k, v in spec.items()}
    parts = [p for p in str(spec).split(",") if p.strip()]
    if len(parts) != len(synth.KINDS):
        raise ConfigError(
            f"--ratios needs {len(synth.KINDS)} comma-separated values "
            f"in order {','.join(synth.KINDS)}"
        )
    return dict(zip(synth.KINDS, (float(p) for p in parts)))


def _fail(message: str):
    raise ConfigError(message)


# ---------------------------------------------------------------------------
# build-probe


_FIXTURE_ITEM_TOKENS = {"document": 13, "code": 19, "database": 12}


def _default_fixture_size(style: str, target_tokens: int) -> int:
    per_context = target_tokens // _FIXTURE_ITEM_TOKENS[style] + 1
    if style == "document":
        # fillers are drawn with replacement; a modest pool suffices
        return max(1000, per_context // 2)
    return 2 * per_context


def cmd_build_probe(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    out_dir = Path(_resolve(args, config, "out") or _fail("--out is required"))
    _setup_run(out_dir, args.verbose)

    style_arg = _resolve(args, config, "style", "all")
    styles = list(probe.STYLES) if style_arg == "all" else [style_arg]
    for s in styles:
        if s not in probe.STYLES:
            raise ConfigError(f"unknown probe style {s!r}")

    resolved = {
        "style": style_arg,
        "n": int(_resolve(args, config, "n", 3000)),
        "target_tokens": int(_resolve(args, config, "target_tokens", 32768)),
        "token_tolerance": float(_resolve(args, config, "token_tolerance", 0.1)),
        "piece_words": int(_resolve(args, config, "piece_words", 8)),
        "queries_per_function": int(_resolve(args, config, "queries_per_function", 1)),
        "source": _resolve(args, config, "source", "fixture"),
        "fixture_size": _resolve(args, config, "fixture_size"),
        "sentences": _resolve(args, config, "sentences"),
        "functions": _resolve(args, config, "functions"),
        "entities": _resolve(args, config, "entities"),
        "tokenizer": _resolve(args, config, "tokenizer", "whitespace"),
        "seed": int(_resolve(args, config, "seed", 0)),
        "jobs": int(_resolve(args, config, "jobs", 1)),
        "out": str(out_dir),
    }
    _write_resolved(out_dir, "build-probe", resolved)

    cfg = probe.ProbeConfig(
        n_examples=resolved["n"],
        target_tokens=resolved["target_tokens"],
        token_tolerance=resolved["token_tolerance"],
        piece_words=resolved["piece_words"],
        queries_per_function=resolved["queries_per_function"],
        tokenizer=resolved["tokenizer"],
    )

    for style in styles:
        source = _load_probe_source(style, resolved, cfg)
        rng = random.Random(resolved["seed"])
        suite = probe.build_suite(style, source, cfg, rng, jobs=resolved["jobs"])
        suite_path = out_dir / f"{style}_suite.jsonl"
        probe.export_suite(suite, suite_path)
        refs_path = out_dir / f"{style}_refs.jsonl"
        with refs_path.open("w", encoding="utf-8") as fh:
            for text in probe.source_reference_texts(style, source):
                fh.write(json.dumps({"text": text}, ensure_ascii=False) + "\n")
        logger.info("wrote %d %s examples to %s", len(suite.examples), style, suite_path)
    return 0


def _load_probe_source(style: str, resolved: dict, cfg: probe.ProbeConfig):
    if resolved["source"] == "fixture":
        size = resolved["fixture_size"] or _default_fixture_size(
            style, cfg.target_tokens
        )
        rng = random.Random(resolved["seed"] + 1)
        return probe.synth_fixture_material(style, int(size), rng)
    if resolved["source"] == "jsonl":
        key = {"document": "sentences", "code": "functions", "database": "entities"}[style]
        path = resolved[key]
        if not path:
            raise ConfigError(f"--{key} is required for style {style} with --source jsonl")
        loader = {
            "document": probe.load_sentences,
            "code": probe.load_functions,
            "database": probe.load_entities,
        }[style]
        return loader(path)
    raise ConfigError(f"unknown probe source {resolved['source']!r}")


# ---------------------------------------------------------------------------
# evaluate / score / report


def _make_responder(resolved: dict, suites: list[probe.ProbeSuite]):
    kind = resolved["responder"]
    if kind == "oracle":
        return evaluation.OracleResponder(suites)
    if kind == "empty":
        return evaluation.EmptyResponder()
    if kind == "remote":
        if not resolved.get("endpoint"):
            raise ConfigError("--endpoint is required with --responder remote")
        return RemoteGeneratorClient(
            endpoint=resolved["endpoint"],
            auth_env=resolved.get("auth_env"),
            rpm=resolved.get("rpm"),
            max_tokens=resolved.get("max_tokens", 1024),
        )
    raise ConfigError(f"unknown responder {kind!r}")


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    out_dir = Path(_resolve(args, config, "out") or _fail("--out is required"))
    _setup_run(out_dir, args.verbose)

    resolved = {
        "suite": _resolve(args, config, "suite") or [],
        "responder": _resolve(args, config, "responder", "oracle"),
        "endpoint": _resolve(args, config, "endpoint"),
        "auth_env": _resolve(args, config, "auth_env"),
        "rpm": _resolve(args, config, "rpm"),
        "max_tokens": _resolve(args, config, "max_tokens"),
        "n_buckets": int(_resolve(args, config, "n_buckets", evaluation.DEFAULT_N_BUCKETS)),
        "strict_em": bool(_resolve(args, config, "strict_em", False)),
        "jobs": int(_resolve(args, config, "jobs", 1)),
        "out": str(out_dir),
    }
    if not resolved["suite"]:
        raise ConfigError("at least one --suite path is required")
    _write_resolved(out_dir, "evaluate", resolved)

    suites = [probe.load_suite(p) for p in resolved["suite"]]
    responder = _make_responder(resolved, suites)

    reports = []
    for suite in suites:
        responses_path = out_dir / f"{suite.style}_responses.jsonl"
        records = evaluation.run_probe(
            suite, responder, out_path=responses_path, concurrency=resolved["jobs"]
        )
        errored = sum(1 for r in records if r.error)
        if records and errored == len(records):
            raise EvalError(
                f"every response for {suite.style} failed; fix the endpoint and "
                f"re-run to resume from {responses_path}"
            )
        report = evaluation.score_suite(
            suite, records, n_buckets=resolved["n_buckets"], strict_em=resolved["strict_em"]
        )
        _write_report_json(report, out_dir / f"{suite.style}_report.json")
        reports.append(report)

    _write_rendered(reports, out_dir)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    out_dir = Path(_resolve(args, config, "out") or _fail("--out is required"))
    _setup_run(out_dir, args.verbose)

    resolved = {
        "suite": _resolve(args, config, "suite") or _fail("--suite is required"),
        "responses": _resolve(args, config, "responses") or _fail("--responses is required"),
        "n_buckets": int(_resolve(args, config, "n_buckets", evaluation.DEFAULT_N_BUCKETS)),
        "strict_em": bool(_resolve(args, config, "strict_em", False)),
        "out": str(out_dir),
    }
    _write_resolved(out_dir, "score", resolved)

    suite = probe.load_suite(resolved["suite"])
    records = evaluation.read_responses(resolved["responses"])
    report = evaluation.score_suite(
        suite, records, n_buckets=resolved["n_buckets"], strict_em=resolved["strict_em"]
    )
    _write_report_json(report, out_dir / f"{suite.style}_report.json")
    _write_rendered([report], out_dir)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    out_dir = Path(_resolve(args, config, "out") or _fail("--out is required"))
    _setup_run(out_dir, args.verbose)

    resolved = {
        "reports": _resolve(args, config, "reports") or [],
        "out": str(out_dir),
    }
    if not resolved["reports"]:
        raise ConfigError("at least one --reports path is required")
    _write_resolved(out_dir, "report", resolved)

    reports = []
    for path in resolved["reports"]:
        reports.append(
            evaluation.report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        )
    _write_rendered(reports, out_dir)
    return 0


def _write_report_json(report, path: Path) -> None:
    path.write_text(
        json.dumps(evaluation.report_to_dict(report), ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _write_rendered(reports: list, out_dir: Path) -> None:
    rendered = evaluation.render_report(reports)
    (out_dir / "report.txt").write_text(rendered.table, encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(rendered.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "curve.csv").write_text(rendered.curve_csv, encoding="utf-8")
    for line in rendered.table.rstrip("\n").split("\n"):
        logger.info("%s", line)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longweave",
        description=(
            "Synthesize long-context QA training data and build/score "
            "position-probing retrieval suites."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--out", help="output directory for this run")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--jobs", type=int, help="worker threads (default 1)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("build-train-data", help="synthesize the training mixture")
    common(p)
    p.add_argument("--corpus", action="append", help="corpus path (repeatable)")
    p.add_argument("--corpus-format", dest="corpus_format", choices=["jsonl", "plain-dir"])
    p.add_argument(
        "--eval-refs",
        dest="eval_refs",
        action="append",
        help="JSONL of evaluation reference texts for decontamination (repeatable)",
    )
    p.add_argument(
        "--no-decontam",
        dest="no_decontam",
        action="store_const",
        const=True,
        help="explicitly waive decontamination",
    )
    p.add_argument("--ngram-size", dest="ngram_size", type=int)
    p.add_argument("--total", type=int, help="number of records to emit")
    p.add_argument("--ratios", help="comma-separated kind ratios (fine,multihop,short,general)")
    p.add_argument("--instructions", help="JSONL of general instruction records")
    p.add_argument("--generator", choices=["mock", "remote"])
    p.add_argument("--endpoint", help="remote generation endpoint URL")
    p.add_argument("--auth-env", dest="auth_env", help="env var holding the bearer token")
    p.add_argument("--rpm", type=float, help="client-side requests per minute")
    p.add_argument("--tokenizer")
    p.add_argument(
        "--skip-malformed",
        dest="skip_malformed",
        action="store_const",
        const=True,
        help="skip malformed corpus records with a warning",
    )
    p.add_argument(
        "--emit-training",
        dest="emit_training",
        action="store_const",
        const=True,
        help="also write training.jsonl with formatted input/output pairs",
    )
    p.set_defaults(func=cmd_build_train_data)

    p = sub.add_parser("build-probe", help="build probing suites")
    common(p)
    p.add_argument("--style", choices=[*probe.STYLES, "all"])
    p.add_argument("--n", type=int, help="examples per suite (default 3000)")
    p.add_argument("--target-tokens", dest="target_tokens", type=int)
    p.add_argument("--token-tolerance", dest="token_tolerance", type=float)
    p.add_argument("--piece-words", dest="piece_words", type=int)
    p.add_argument("--queries-per-function", dest="queries_per_function", type=int)
    p.add_argument("--source", choices=["fixture", "jsonl"])
    p.add_argument("--fixture-size", dest="fixture_size", type=int)
    p.add_argument("--sentences", help="JSONL with {text} records")
    p.add_argument("--functions", help="JSONL with {name, body_lines[]} records")
    p.add_argument("--entities", help="JSONL with {id, label, description} records")
    p.add_argument("--tokenizer")
    p.set_defaults(func=cmd_build_probe)

    p = sub.add_parser("evaluate", help="run suites against a responder and score")
    common(p)
    p.add_argument("--suite", action="append", help="suite JSONL path (repeatable)")
    p.add_argument("--responder", choices=["oracle", "empty", "remote"])
    p.add_argument("--endpoint")
    p.add_argument("--auth-env", dest="auth_env")
    p.add_argument("--rpm", type=float)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--n-buckets", dest="n_buckets", type=int)
    p.add_argument(
        "--strict-em",
        dest="strict_em",
        action="store_const",
        const=True,
        help="exact match requires whole-response equality",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", help="rescore saved responses offline")
    common(p)
    p.add_argument("--suite")
    p.add_argument("--responses")
    p.add_argument("--n-buckets", dest="n_buckets", type=int)
    p.add_argument(
        "--strict-em", dest="strict_em", action="store_const", const=True
    )
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="merge saved per-style reports")
    common(p)
    p.add_argument("--reports", action="append", help="report JSON path (repeatable)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return _exit_code(exc)
    except OSError as exc:
        logger.error("i/o failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
