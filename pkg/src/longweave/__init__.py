"""longweave: long-context QA data synthesis and position-probing toolkit."""

__version__ = "0.1.0"

from .corpus import (
    RawDocument,
    Segment,
    Tokenizer,
    WhitespaceTokenizer,
    count_tokens,
    extract_random_segment,
    load_corpus,
    split_segments,
)
from .decontam import NgramIndex, build_ngram_index, is_contaminated
from .errors import ToolkitError
from .evaluation import (
    EmptyResponder,
    OracleResponder,
    ResponseRecord,
    ScoreReport,
    bucketize,
    compute_avg_gap,
    render_report,
    run_probe,
    score_exact_match,
    score_recall,
    score_relaxed_em,
    score_suite,
)
from .probe import (
    ProbeConfig,
    ProbeExample,
    ProbeSuite,
    build_code_suite,
    build_database_suite,
    build_document_suite,
    export_suite,
    load_suite,
    synth_fixture_material,
)
from .qagen import (
    GeneratorClient,
    MockGeneratorClient,
    QAPair,
    RemoteGeneratorClient,
    generate_qa,
    mock_generate,
    parse_completion,
    render_fine_prompt,
    render_multihop_prompt,
)
from .synth import (
    DatasetManifest,
    FillerPool,
    LongContextExample,
    assemble_fine_example,
    assemble_multihop_example,
    build_mixture,
    build_training_dataset,
    format_training_example,
    make_short_context_example,
    sample_target_length,
)

__all__ = [name for name in dir() if not name.startswith("_")]
