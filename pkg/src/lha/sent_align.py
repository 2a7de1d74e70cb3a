"""Stage 2: align sentences inside each document pair.

Within a DocPair we score every sentence combination, keep the union of
row-wise and column-wise top-K pairs above theta_s, and merge overlapping
pairs into groups (connected components of the bipartite pair graph). The
post-filters then drop groups with weak lexical overlap, runaway target
length, or test-set leakage.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .corpus import Document, content_tokens, tokenize
from .doc_align import DocPair
from .metrics import Scorer, unigram_overlap

__all__ = [
    "SimMatrix",
    "AlignedGroup",
    "FilterPolicy",
    "sentence_sim_matrix",
    "extract_nn_pairs",
    "merge_components",
    "merge_groups",
    "filter_reason",
    "filter_groups",
    "align_sentences",
    "normalize_pair_key",
    "load_exclusion_set",
    "write_groups",
    "read_groups",
    "write_groups_tsv",
]

logger = logging.getLogger(__name__)

_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class SimMatrix:
    source_sentence_ids: tuple[str, ...]
    target_sentence_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        expected = (len(self.source_sentence_ids), len(self.target_sentence_ids))
        if self.values.shape != expected:
            raise ValueError(f"matrix shape {self.values.shape} != {expected}")


@dataclass(frozen=True)
class AlignedGroup:
    """A pseudo-parallel group: one or more sentences per side, in document
    order, with the maximum member-pair similarity as the group score."""

    source_doc: str
    target_doc: str
    source_ids: tuple[str, ...]
    target_ids: tuple[str, ...]
    source_text: str
    target_text: str
    score: float


@dataclass(frozen=True)
class FilterPolicy:
    min_overlap: float = 0.4
    max_len_ratio: float = 1.5
    exclusion_set: frozenset[tuple[str, str]] = frozenset()
    stage: str = "group"  # "group" (post-merge, default) or "pair" (pre-merge)

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_overlap <= 1.0:
            raise ValueError(f"min_overlap must be in [0,1], got {self.min_overlap}")
        if self.max_len_ratio <= 0.0:
            raise ValueError(f"max_len_ratio must be > 0, got {self.max_len_ratio}")
        if self.stage not in ("group", "pair"):
            raise ValueError(f"stage must be 'group' or 'pair', got {self.stage!r}")


def normalize_pair_key(source_text: str, target_text: str) -> tuple[str, str]:
    """Lowercase and collapse whitespace; the exclusion-set key form."""
    return (
        _WS_RE.sub(" ", source_text).strip().lower(),
        _WS_RE.sub(" ", target_text).strip().lower(),
    )


def load_exclusion_set(path: Path | str) -> frozenset[tuple[str, str]]:
    """Load test-set sentence pairs to exclude, TSV source<TAB>target."""
    keys = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(
                    f"{path}: line {line_no}: expected 2 tab-separated fields"
                )
            keys.add(normalize_pair_key(fields[0], fields[1]))
    return frozenset(keys)


def sentence_sim_matrix(src_doc: Document, tgt_doc: Document, scorer: Scorer) -> SimMatrix:
    """Score every sentence of src_doc against every sentence of tgt_doc.

    Sentences the scorer cannot embed score 0 against everything.
    """
    if not src_doc.sentences or not tgt_doc.sentences:
        raise ValueError(
            f"empty document in pair ({src_doc.doc_id!r}, {tgt_doc.doc_id!r})"
        )
    values = scorer.matrix(src_doc.sentences, tgt_doc.sentences)
    return SimMatrix(
        source_sentence_ids=tuple(s.uid for s in src_doc.sentences),
        target_sentence_ids=tuple(s.uid for s in tgt_doc.sentences),
        values=values,
    )


def extract_nn_pairs(
    matrix: SimMatrix | np.ndarray, k: int, theta_s: float
) -> list[tuple[int, int, float]]:
    """Union of row-wise and column-wise top-k entries with value >= theta_s.

    Returns (i, j, similarity) triples sorted by (i, j). Ties inside a
    row/column top-k break toward the lower index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    values = matrix.values if isinstance(matrix, SimMatrix) else np.asarray(matrix)
    n_rows, n_cols = values.shape
    chosen: set[tuple[int, int]] = set()
    for i in range(n_rows):
        row = values[i]
        order = np.lexsort((np.arange(n_cols), -row))[:k]
        for j in order:
            if row[j] >= theta_s:
                chosen.add((i, int(j)))
    for j in range(n_cols):
        col = values[:, j]
        order = np.lexsort((np.arange(n_rows), -col))[:k]
        for i in order:
            if col[i] >= theta_s:
                chosen.add((int(i), j))
    return [(i, j, float(values[i, j])) for i, j in sorted(chosen)]


def merge_components(
    pairs: Sequence[tuple[int, int] | tuple[int, int, float]],
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Connected components of the bipartite graph given by (i, j) pairs.

    Returns (source_indices, target_indices) per component, each side sorted,
    components ordered by their index tuples. Union-find with path halving.
    """
    parent: dict[tuple[str, int], tuple[str, int]] = {}

    def find(x: tuple[str, int]) -> tuple[str, int]:
        root = parent.setdefault(x, x)
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(x: tuple[str, int], y: tuple[str, int]) -> None:
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[rx] = ry

    for pair in pairs:
        union(("s", int(pair[0])), ("t", int(pair[1])))
    comps: dict[tuple[str, int], tuple[set[int], set[int]]] = {}
    for node in parent:
        side, idx = node
        srcs, tgts = comps.setdefault(find(node), (set(), set()))
        (srcs if side == "s" else tgts).add(idx)
    out = [
        (tuple(sorted(srcs)), tuple(sorted(tgts)))
        for srcs, tgts in comps.values()
    ]
    out.sort()
    return out


def merge_groups(
    pairs: Sequence[tuple[int, int, float]], src_doc: Document, tgt_doc: Document
) -> list[AlignedGroup]:
    """Merge surviving pairs into AlignedGroups (one per connected component).

    Sides are emitted in document order, joined by single spaces; the group
    score is the maximum member-pair similarity.
    """
    components = merge_components(pairs)
    best: dict[tuple[int, ...], float] = {}
    member_of: dict[int, tuple[int, ...]] = {}
    for srcs, _ in components:
        for i in srcs:
            member_of[i] = srcs
    for i, j, sim in pairs:
        key = member_of[i]
        if key not in best or sim > best[key]:
            best[key] = sim
    groups = []
    for srcs, tgts in components:
        groups.append(
            AlignedGroup(
                source_doc=src_doc.doc_id,
                target_doc=tgt_doc.doc_id,
                source_ids=tuple(src_doc.sentences[i].uid for i in srcs),
                target_ids=tuple(tgt_doc.sentences[j].uid for j in tgts),
                source_text=" ".join(src_doc.sentences[i].text for i in srcs),
                target_text=" ".join(tgt_doc.sentences[j].text for j in tgts),
                score=best[srcs],
            )
        )
    return groups


def filter_reason(
    group: AlignedGroup,
    policy: FilterPolicy,
    stopwords: frozenset[str] | None = None,
) -> str | None:
    """Why the policy drops this group, or None if it passes.

    Checked in order: lexical overlap (content tokens of the target covered
    by the source), target/source length ratio over all tokens, and the
    exclusion set on normalized text keys.
    """
    src_tokens = tokenize(group.source_text, stopwords)
    tgt_tokens = tokenize(group.target_text, stopwords)
    overlap = unigram_overlap(content_tokens(src_tokens), content_tokens(tgt_tokens))
    if overlap < policy.min_overlap:
        return "overlap"
    if len(tgt_tokens) > policy.max_len_ratio * len(src_tokens):
        return "length_ratio"
    if normalize_pair_key(group.source_text, group.target_text) in policy.exclusion_set:
        return "excluded"
    return None


def filter_groups(
    groups: Iterable[AlignedGroup],
    policy: FilterPolicy,
    stopwords: frozenset[str] | None = None,
) -> list[AlignedGroup]:
    return [g for g in groups if filter_reason(g, policy, stopwords) is None]


def align_sentences(
    doc_pairs: Sequence[DocPair],
    src_docs: Mapping[str, Document],
    tgt_docs: Mapping[str, Document],
    scorer: Scorer,
    k: int,
    theta_s: float,
    policy: FilterPolicy | None = None,
    stopwords: frozenset[str] | None = None,
    drop_counts: dict[str, int] | None = None,
) -> Iterator[AlignedGroup]:
    """Run the full sentence stage over a list of document pairs.

    Yields filtered groups in doc-pair order, deduplicated globally on the
    exact (source_text, target_text) pair. A doc pair referencing an unknown
    document id is logged and skipped. ``drop_counts``, when given, is
    filled with per-reason drop tallies.
    """
    policy = policy or FilterPolicy()
    counts = drop_counts if drop_counts is not None else {}
    for key in ("missing_doc", "overlap", "length_ratio", "excluded", "duplicate",
                "raw_pairs", "merged_groups"):
        counts.setdefault(key, 0)
    seen: set[tuple[str, str]] = set()
    for dp in doc_pairs:
        src = src_docs.get(dp.source_id)
        tgt = tgt_docs.get(dp.target_id)
        if src is None or tgt is None:
            missing = dp.source_id if src is None else dp.target_id
            logger.warning("skipping doc pair (%s, %s): unknown document %r",
                           dp.source_id, dp.target_id, missing)
            counts["missing_doc"] += 1
            continue
        matrix = sentence_sim_matrix(src, tgt, scorer)
        pairs = extract_nn_pairs(matrix, k, theta_s)
        counts["raw_pairs"] += len(pairs)
        if policy.stage == "pair":
            kept_pairs = []
            for i, j, sim in pairs:
                single = AlignedGroup(
                    source_doc=src.doc_id,
                    target_doc=tgt.doc_id,
                    source_ids=(src.sentences[i].uid,),
                    target_ids=(tgt.sentences[j].uid,),
                    source_text=src.sentences[i].text,
                    target_text=tgt.sentences[j].text,
                    score=sim,
                )
                reason = filter_reason(single, policy, stopwords)
                if reason is None:
                    kept_pairs.append((i, j, sim))
                else:
                    counts[reason] += 1
            pairs = kept_pairs
        groups = merge_groups(pairs, src, tgt)
        counts["merged_groups"] += len(groups)
        if policy.stage == "group":
            kept = []
            for g in groups:
                reason = filter_reason(g, policy, stopwords)
                if reason is None:
                    kept.append(g)
                else:
                    counts[reason] += 1
            groups = kept
        for g in groups:
            key = (g.source_text, g.target_text)
            if key in seen:
                counts["duplicate"] += 1
                continue
            seen.add(key)
            yield g


def write_groups(groups: Iterable[AlignedGroup], path: Path | str) -> int:
    """Write groups as JSONL. Returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            record = {
                "source_doc": g.source_doc,
                "target_doc": g.target_doc,
                "source_ids": list(g.source_ids),
                "target_ids": list(g.target_ids),
                "source_text": g.source_text,
                "target_text": g.target_text,
                "score": g.score,
            }
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def read_groups(path: Path | str) -> list[AlignedGroup]:
    groups = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            groups.append(
                AlignedGroup(
                    source_doc=r["source_doc"],
                    target_doc=r["target_doc"],
                    source_ids=tuple(r["source_ids"]),
                    target_ids=tuple(r["target_ids"]),
                    source_text=r["source_text"],
                    target_text=r["target_text"],
                    score=float(r["score"]),
                )
            )
    return groups


def write_groups_tsv(groups: Iterable[AlignedGroup], path: Path | str) -> int:
    """Write ``source_text<TAB>target_text`` lines for translation tooling."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(f"{g.source_text}\t{g.target_text}\n")
            n += 1
    return n
