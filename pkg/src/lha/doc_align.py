"""Stage 1: pair each source document with its nearest target documents.

For every source embedding row the target index is queried for K neighbors;
pairs below theta_d are dropped. Output is canonicalized by source id, then
similarity descending, then target id, so runs are comparable byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .ann_index import AnnIndex
from .embeddings import EmbeddingMatrix

__all__ = ["DocPair", "align_documents", "write_doc_pairs", "read_doc_pairs"]


@dataclass(frozen=True)
class DocPair:
    source_id: str
    target_id: str
    similarity: float


def align_documents(
    src: EmbeddingMatrix, tgt_index: AnnIndex, k: int, theta_d: float
) -> list[DocPair]:
    """Retrieve up to k targets per source document, keeping similarity >= theta_d.

    All-zero source rows have no meaningful cosine and are skipped. Ties at
    the k boundary break by lexicographic target id (the index guarantees
    this ordering).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if src.dim != tgt_index.dim:
        raise ValueError(f"source dim {src.dim} != index dim {tgt_index.dim}")
    rows64 = src.rows.astype(np.float64)
    norms = np.linalg.norm(rows64, axis=1)
    pairs: list[DocPair] = []
    for i, source_id in enumerate(src.unit_ids):
        if norms[i] == 0.0:
            continue
        for nb in tgt_index.query(rows64[i], k):
            if nb.similarity >= theta_d:
                pairs.append(
                    DocPair(
                        source_id=source_id,
                        target_id=nb.unit_id,
                        similarity=nb.similarity,
                    )
                )
    pairs.sort(key=lambda p: (p.source_id, -p.similarity, p.target_id))
    return pairs


def write_doc_pairs(pairs: Iterable[DocPair], path: Path | str) -> int:
    """Write pairs as TSV ``source_id<TAB>target_id<TAB>similarity``."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.source_id}\t{p.target_id}\t{p.similarity:.6f}\n")
            n += 1
    return n


def read_doc_pairs(path: Path | str) -> list[DocPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(
                    f"{path}: line {line_no}: expected 3 tab-separated fields, "
                    f"got {len(fields)}"
                )
            try:
                sim = float(fields[2])
            except ValueError as e:
                raise ValueError(
                    f"{path}: line {line_no}: unparsable similarity {fields[2]!r}"
                ) from e
            pairs.append(DocPair(fields[0], fields[1], sim))
    return pairs
