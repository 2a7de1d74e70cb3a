"""Shared builders and fixtures for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from lha.corpus import Document, Sentence, tokenize
from lha.embeddings import WordVectorTable


def sent(text: str, doc_id: str = "d0", ordinal: int = 0) -> Sentence:
    return Sentence(doc_id=doc_id, ordinal=ordinal, text=text, tokens=tokenize(text))


def doc(
    doc_id: str,
    texts: list[str],
    tag: str = "source",
    title: str | None = None,
) -> Document:
    sentences = tuple(sent(t, doc_id=doc_id, ordinal=i) for i, t in enumerate(texts))
    return Document(doc_id=doc_id, dataset_tag=tag, sentences=sentences, title=title)


def write_jsonl(path: Path, records: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


def write_vectors(path: Path, table: dict[str, list[float]]) -> Path:
    dim = len(next(iter(table.values())))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)} {dim}\n")
        for word, vec in table.items():
            fh.write(word + " " + " ".join(f"{x:.6f}" for x in vec) + "\n")
    return path


# A tiny hand vocabulary on the 3d axes: pets cluster on x, food on y,
# weather on z, so cosine structure between topics is predictable.
_TOY_VECTORS = {
    "cat": [1.0, 0.0, 0.0],
    "dog": [0.9, 0.1, 0.0],
    "kitten": [0.95, 0.05, 0.0],
    "puppy": [0.85, 0.15, 0.0],
    "apple": [0.0, 1.0, 0.0],
    "banana": [0.0, 0.9, 0.1],
    "bread": [0.1, 0.85, 0.0],
    "rain": [0.0, 0.0, 1.0],
    "snow": [0.0, 0.1, 0.9],
    "storm": [0.1, 0.0, 0.95],
    "sun": [0.2, 0.1, 0.8],
}


@pytest.fixture
def toy_table() -> WordVectorTable:
    vectors = {w: np.asarray(v, dtype=np.float64) for w, v in _TOY_VECTORS.items()}
    return WordVectorTable(dim=3, vectors=vectors)


@pytest.fixture
def toy_vectors_file(tmp_path: Path) -> Path:
    return write_vectors(tmp_path / "vectors.txt", _TOY_VECTORS)
