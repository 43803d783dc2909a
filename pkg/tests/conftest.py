import random

import pytest

from longweave.corpus import RawDocument, WhitespaceTokenizer


def make_docs(n_docs: int, seed: int = 0, min_words: int = 150, max_words: int = 700):
    """Synthetic corpus: every word is unique per document, with sentence
    punctuation every few words so first-sentence extraction has bite."""
    rng = random.Random(seed)
    docs = []
    for i in range(n_docs):
        n = rng.randint(min_words, max_words)
        words = []
        for w in range(n):
            word = f"d{i}w{w}"
            if w % 9 == 8:
                word += "."
            words.append(word)
        docs.append(RawDocument(id=f"doc{i}", text=" ".join(words), source="fixture"))
    return docs


def make_doc_with_words(n_words: int, doc_id: str = "doc", prefix: str = "w"):
    words = []
    for i in range(n_words):
        word = f"{prefix}{i}"
        if i % 9 == 8:
            word += "."
        words.append(word)
    return RawDocument(id=doc_id, text=" ".join(words), source="fixture")


@pytest.fixture
def tok():
    return WhitespaceTokenizer()


@pytest.fixture(scope="session")
def big_corpus():
    """~250K tokens, comfortably above the 32K max target plus a gold doc."""
    return make_docs(600, seed=0)
