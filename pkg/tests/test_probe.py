import json
import random
from collections import Counter
from dataclasses import replace

import pytest

from longweave.errors import ProbeBuildError, SuiteValidationError
from longweave.probe import (
    EntityRecord,
    FunctionRecord,
    GoldSpec,
    ProbeConfig,
    build_code_suite,
    build_database_suite,
    build_document_suite,
    export_suite,
    load_entities,
    load_functions,
    load_sentences,
    load_suite,
    render_entity,
    render_function,
    source_reference_texts,
    synth_fixture_material,
    validate_example,
    validate_suite,
)

SMALL = ProbeConfig(n_examples=30, target_tokens=2048)


@pytest.fixture(scope="module")
def sentences():
    return synth_fixture_material("document", 400, random.Random(1))


@pytest.fixture(scope="module")
def functions():
    return synth_fixture_material("code", 400, random.Random(2))


@pytest.fixture(scope="module")
def entities():
    return synth_fixture_material("database", 600, random.Random(3))


def eight_grams(sentence):
    words = sentence.split()
    return {tuple(words[i : i + 8]) for i in range(len(words) - 7)}


class TestFixtures:
    def test_sentences_distinct_no_shared_8gram(self):
        sents = synth_fixture_material("document", 100, random.Random(0))
        assert len(set(sents)) == 100
        seen = set()
        for s in sents:
            grams = eight_grams(s)
            assert grams, "fixture sentences must be at least 8 words"
            assert not (grams & seen)
            seen |= grams

    def test_function_names_unique(self):
        fns = synth_fixture_material("code", 10, random.Random(0))
        assert len({f.name for f in fns}) == 10
        for f in fns:
            assert len(f.body_lines) >= 3
            assert len(set(f.body_lines)) == len(f.body_lines)
            assert all(f.name not in ln for ln in f.body_lines)

    def test_entity_ids_unique(self):
        ents = synth_fixture_material("database", 50, random.Random(0))
        assert len({e.id for e in ents}) == 50
        assert len({e.label for e in ents}) == 50

    def test_same_seed_identical(self):
        a = synth_fixture_material("document", 20, random.Random(5))
        b = synth_fixture_material("document", 20, random.Random(5))
        assert a == b

    def test_unknown_style(self):
        with pytest.raises(ValueError):
            synth_fixture_material("video", 3, random.Random(0))


class TestDocumentSuite:
    def test_build_and_validate(self, sentences):
        suite = build_document_suite(sentences, SMALL, random.Random(4))
        assert len(suite.examples) == 30
        validate_suite(suite)
        for ex in suite.examples:
            assert ex.pattern == "bidirectional"
            piece_words = len(ex.gold.piece.split())
            assert piece_words == SMALL.piece_words

    def test_interior_piece_on_ten_word_sentence(self):
        # every filler is 9 words, too short to host an interior 8-word
        # piece, so the 10-word sentence must be the gold every time
        gold = "A B C D E F G H I J"
        fillers = [
            f"Filler {k} words alpha{k} beta{k} gamma{k} delta{k} extra here."
            for k in range(120)
        ]
        cfg = ProbeConfig(n_examples=20, target_tokens=1024)
        suite = build_document_suite([gold] + fillers, cfg, random.Random(10))
        for ex in suite.examples:
            assert ex.gold.sentence == gold
            # only one valid interior 8-word window: B..I
            assert ex.gold.piece == "B C D E F G H I"

    def test_piece_unique_in_context(self, sentences):
        suite = build_document_suite(sentences, SMALL, random.Random(6))
        for ex in suite.examples:
            assert ex.context.count(ex.gold.piece) == 1

    def test_depth_deciles_3000(self, sentences):
        cfg = ProbeConfig(n_examples=3000, target_tokens=2048)
        suite = build_document_suite(sentences, cfg, random.Random(12))
        deciles = Counter(min(int(ex.gold_depth * 10), 9) for ex in suite.examples)
        for d in range(10):
            assert abs(deciles[d] - 300) <= 60, f"decile {d}: {deciles[d]}"

    def test_pool_too_small(self):
        with pytest.raises(ProbeBuildError):
            build_document_suite(["one sentence"], SMALL, random.Random(0))

    def test_oversized_filler_skipped_not_fatal(self):
        # a filler bigger than the tolerance headroom is skipped, so the
        # context still lands inside [0.9, 1.1] x target
        monster = " ".join(f"huge{i}" for i in range(1500))
        pool = synth_fixture_material("document", 200, random.Random(19)) + [monster]
        cfg = ProbeConfig(n_examples=20, target_tokens=1024)
        suite = build_document_suite(pool, cfg, random.Random(20))
        for ex in suite.examples:
            assert ex.context_tokens <= 1.1 * 1024
            assert monster not in ex.context


class TestCodeSuite:
    def test_build_and_validate(self, functions):
        suite = build_code_suite(functions, SMALL, random.Random(7))
        assert len(suite.examples) == 30
        validate_suite(suite)
        for ex in suite.examples:
            assert ex.pattern == "backward"

    def test_queried_line_among_first_three_and_name_free(self, functions):
        by_name = {f.name: f for f in functions}
        suite = build_code_suite(functions, SMALL, random.Random(8))
        for ex in suite.examples:
            fn = by_name[ex.gold.function_name]
            assert ex.gold.queried_line in fn.body_lines[:3]
            assert ex.gold.function_name not in ex.gold.queried_line

    def test_name_offset_precedes_line_offset(self, functions):
        suite = build_code_suite(functions, SMALL, random.Random(9))
        for ex in suite.examples:
            name_at = ex.context.find(f"def {ex.gold.function_name}(")
            line_at = ex.context.find(ex.gold.queried_line)
            assert 0 <= name_at < line_at

    def test_short_functions_skipped(self):
        fns = [
            FunctionRecord(name="tiny_fn", body_lines=("a = 1", "return a")),
            *synth_fixture_material("code", 300, random.Random(11)),
        ]
        suite = build_code_suite(fns, SMALL, random.Random(12))
        assert all(ex.gold.function_name != "tiny_fn" for ex in suite.examples)

    def test_queries_per_function_groups(self, functions):
        cfg = ProbeConfig(n_examples=9, target_tokens=2048, queries_per_function=3)
        suite = build_code_suite(functions, cfg, random.Random(13))
        names = [ex.gold.function_name for ex in suite.examples]
        for g in range(3):
            group = names[3 * g : 3 * g + 3]
            assert len(set(group)) == 1, f"group {g} spans functions: {group}"
            lines = {suite.examples[3 * g + k].gold.queried_line for k in range(3)}
            assert len(lines) == 3

    def test_pool_too_small_for_target(self):
        fns = synth_fixture_material("code", 20, random.Random(14))
        with pytest.raises(ProbeBuildError, match="pool too small"):
            build_code_suite(fns, ProbeConfig(n_examples=2, target_tokens=4096), random.Random(0))


class TestDatabaseSuite:
    def test_build_and_validate(self, entities):
        suite = build_database_suite(entities, SMALL, random.Random(15))
        assert len(suite.examples) == 30
        validate_suite(suite)
        for ex in suite.examples:
            assert ex.pattern == "forward"

    def test_gold_fields_and_forward_offsets(self, entities):
        by_id = {e.id: e for e in entities}
        suite = build_database_suite(entities, SMALL, random.Random(16))
        for ex in suite.examples:
            ent = by_id[ex.gold.entity_id]
            assert ex.gold.label == ent.label
            assert ex.gold.description == ent.description
            id_at = ex.context.find(f"ID: {ex.gold.entity_id}\n")
            assert id_at >= 0
            assert ex.context.find(ex.gold.label) > id_at
            assert ex.context.find(ex.gold.description) > id_at

    def test_id_unique_whole_token(self, entities):
        suite = build_database_suite(entities, SMALL, random.Random(17))
        for ex in suite.examples:
            # Q100001 must not match inside Q1000012 etc.
            assert ex.context.count(f"ID: {ex.gold.entity_id}\n") == 1

    def test_instruction_carries_id(self, entities):
        suite = build_database_suite(entities, SMALL, random.Random(18))
        for ex in suite.examples:
            assert ex.gold.entity_id in ex.instruction


class TestValidation:
    def make_example(self, sentences):
        suite = build_document_suite(sentences, SMALL, random.Random(20))
        return suite.examples[0]

    def test_tampered_context_tokens_names_invariant(self, sentences):
        ex = replace(self.make_example(sentences), context_tokens=99)
        with pytest.raises(SuiteValidationError, match="context_tokens"):
            validate_example(ex, SMALL)

    def test_wrong_pattern_names_pairing(self, sentences):
        ex = replace(self.make_example(sentences), pattern="forward")
        with pytest.raises(SuiteValidationError, match="pairing"):
            validate_example(ex, SMALL)

    def test_depth_out_of_range(self, sentences):
        ex = replace(self.make_example(sentences), gold_depth=1.5)
        with pytest.raises(SuiteValidationError, match="gold_depth"):
            validate_example(ex, SMALL)

    def test_missing_gold_field(self, sentences):
        ex = replace(self.make_example(sentences), gold=GoldSpec(sentence="s only"))
        with pytest.raises(SuiteValidationError, match="missing"):
            validate_example(ex, SMALL)

    def test_piece_not_interior(self, sentences):
        ex = self.make_example(sentences)
        words = ex.gold.sentence.split()
        leading = " ".join(words[: SMALL.piece_words])
        bad_ctx = ex.context.replace(ex.gold.piece, "x " * SMALL.piece_words).replace(
            ex.gold.sentence.replace(ex.gold.piece, "x " * SMALL.piece_words),
            ex.gold.sentence,
        )
        tampered = replace(ex, gold=replace(ex.gold, piece=leading), context=bad_ctx)
        with pytest.raises(SuiteValidationError):
            validate_example(tampered, SMALL)


class TestSerialization:
    def test_export_load_round_trip(self, sentences, tmp_path):
        suite = build_document_suite(sentences, SMALL, random.Random(21))
        path = tmp_path / "suite.jsonl"
        export_suite(suite, path)
        loaded = load_suite(path)
        assert loaded.style == suite.style
        assert loaded.seed == suite.seed
        assert loaded.config == suite.config
        assert loaded.examples == suite.examples

    def test_export_deterministic(self, sentences, tmp_path):
        a = build_document_suite(sentences, SMALL, random.Random(22))
        b = build_document_suite(sentences, SMALL, random.Random(22))
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        export_suite(a, pa)
        export_suite(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_jobs_do_not_change_bytes(self, entities, tmp_path):
        a = build_database_suite(entities, SMALL, random.Random(23), jobs=1)
        b = build_database_suite(entities, SMALL, random.Random(23), jobs=4)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        export_suite(a, pa)
        export_suite(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_tampered_file_fails_validation(self, sentences, tmp_path):
        suite = build_document_suite(sentences, SMALL, random.Random(24))
        path = tmp_path / "suite.jsonl"
        export_suite(suite, path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[1])
        record["context_tokens"] = 1
        lines[1] = json.dumps(record, ensure_ascii=False)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SuiteValidationError, match="context_tokens"):
            load_suite(path)

    def test_missing_gold_key_is_schema_error(self, sentences, tmp_path):
        suite = build_document_suite(sentences, SMALL, random.Random(25))
        path = tmp_path / "suite.jsonl"
        export_suite(suite, path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[1])
        del record["gold"]
        lines[1] = json.dumps(record, ensure_ascii=False)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SuiteValidationError, match="missing fields"):
            load_suite(path)

    def test_missing_meta_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(SuiteValidationError, match="meta"):
            load_suite(path)


class TestSourceIO:
    def test_jsonl_loaders(self, tmp_path):
        (tmp_path / "s.jsonl").write_text('{"text": "a sentence"}\n')
        (tmp_path / "f.jsonl").write_text(
            json.dumps({"name": "fn_one", "body_lines": ["a = 1", "b = 2", "c = 3"]}) + "\n"
        )
        (tmp_path / "e.jsonl").write_text(
            json.dumps({"id": "Q1", "label": "alpha", "description": "first letter"}) + "\n"
        )
        assert load_sentences(tmp_path / "s.jsonl") == ["a sentence"]
        (fn,) = load_functions(tmp_path / "f.jsonl")
        assert fn == FunctionRecord(name="fn_one", body_lines=("a = 1", "b = 2", "c = 3"))
        (ent,) = load_entities(tmp_path / "e.jsonl")
        assert ent == EntityRecord(id="Q1", label="alpha", description="first letter")

    def test_reference_texts_cover_sources(self, sentences, functions, entities):
        assert source_reference_texts("document", sentences[:3]) == sentences[:3]
        fn_refs = source_reference_texts("code", functions[:2])
        assert fn_refs == [render_function(f) for f in functions[:2]]
        ent_refs = source_reference_texts("database", entities[:2])
        assert ent_refs == [render_entity(e) for e in entities[:2]]
