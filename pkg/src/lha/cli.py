"""Command-line interface: embed, index, align-docs, align-sents, eval, run."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .ann_index import AnnIndex, IndexParams, build_index
from .corpus import content_tokens, corpus_index, load_abbreviations, load_corpus, load_stopwords
from .doc_align import align_documents, read_doc_pairs, write_doc_pairs
from .embeddings import (
    AvgEmbedder,
    DualMatrixEmbedder,
    PrecomputedEmbedder,
    embed_corpus,
    load_embeddings,
    load_word_vectors,
    save_embeddings,
)
from .evaluate import (
    eval_document_alignment,
    eval_joint,
    eval_sentence_alignment,
    load_eval_dataset,
)
from .metrics import Bm25Stats, CosineScorer, make_scorer
from .pipeline import PipelineConfig, PipelineStageError, run_pipeline, validate_config
from .sent_align import (
    FilterPolicy,
    align_sentences,
    load_exclusion_set,
    write_groups,
    write_groups_tsv,
)

logger = logging.getLogger("lha")


@click.group()
@click.version_option(version=__version__, prog_name="lha")
@click.option("--quiet", is_flag=True, help="Only warnings and errors on stderr.")
def main(quiet: bool) -> None:
    """Extract pseudo-parallel sentence pairs from comparable corpora."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _parse_strategy(strategy: str, vectors: str | None, dim_hint: str):
    """Resolve --strategy avg|precomputed:<path> into an embedder."""
    if strategy == "avg":
        if not vectors:
            raise click.UsageError("--strategy avg requires --vectors")
        return AvgEmbedder(load_word_vectors(vectors))
    if strategy.startswith("precomputed:"):
        path = strategy.split(":", 1)[1]
        if not path:
            raise click.UsageError("--strategy precomputed:<path> needs a path")
        return PrecomputedEmbedder(load_embeddings(path))
    raise click.UsageError(
        f"unknown {dim_hint} strategy {strategy!r}; use avg or precomputed:<path>"
    )


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--level", type=click.Choice(["doc", "sent"]), required=True)
@click.option("--strategy", default="avg", show_default=True,
              help="avg or precomputed:<embedding file>")
@click.option("--vectors", type=click.Path(exists=True, dir_okay=False),
              help="Word-vector file for the avg strategy.")
@click.option("--normalize/--no-normalize", default=True, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--dataset-tag", default="", help="Tag stored on loaded documents.")
@click.option("--stopwords", type=click.Path(exists=True, dir_okay=False))
@click.option("--abbreviations", type=click.Path(exists=True, dir_okay=False))
def embed(corpus, level, strategy, vectors, normalize, out, dataset_tag,
          stopwords, abbreviations) -> None:
    """Embed a corpus at document or sentence level into a binary file."""
    embedder = _parse_strategy(strategy, vectors, "embedding")
    docs = load_corpus(
        corpus,
        dataset_tag,
        stopwords=load_stopwords(stopwords),
        abbreviations=load_abbreviations(abbreviations),
    )
    matrix = embed_corpus(
        docs,
        "document" if level == "doc" else "sentence",
        embedder,
        normalize=normalize,
    )
    save_embeddings(matrix, out)
    logger.info("wrote %d x %d embeddings to %s", matrix.count, matrix.dim, out)


@main.command()
@click.option("--embeddings", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--trees", default=50, show_default=True, type=int)
@click.option("--leaf-size", default=100, show_default=True, type=int)
@click.option("--search-k", default=25000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def index(embeddings, out, trees, leaf_size, search_k, seed) -> None:
    """Build the nearest-neighbor index over an embedding file."""
    matrix = load_embeddings(embeddings)
    params = IndexParams(trees=trees, leaf_size=leaf_size, seed=seed, search_k=search_k)
    idx = build_index(matrix, params)
    idx.save(out)
    logger.info("indexed %d rows (dim %d) into %s", idx.size, idx.dim, out)


@main.command("align-docs")
@click.option("--source-embeddings", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--index", "index_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=5, show_default=True, type=int)
@click.option("--theta-d", default=0.5, show_default=True, type=float)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def align_docs(source_embeddings, index_path, k, theta_d, out) -> None:
    """Stage 1: pair source documents with nearest target documents."""
    src = load_embeddings(source_embeddings)
    idx = AnnIndex.load(index_path)
    pairs = align_documents(src, idx, k, theta_d)
    n = write_doc_pairs(pairs, out)
    logger.info("wrote %d document pairs to %s", n, out)


def _build_cli_scorer(scorer, vectors, source_sent_embeddings, target_sent_embeddings,
                      tgt_docs, bm25_k1, bm25_b):
    if scorer == "cosine":
        if source_sent_embeddings and target_sent_embeddings:
            return CosineScorer(
                DualMatrixEmbedder(
                    load_embeddings(source_sent_embeddings),
                    load_embeddings(target_sent_embeddings),
                )
            )
        if vectors:
            return CosineScorer(AvgEmbedder(load_word_vectors(vectors)))
        raise click.UsageError(
            "cosine needs --vectors or both --source-sent-embeddings and "
            "--target-sent-embeddings"
        )
    if scorer == "bm25":
        stats = Bm25Stats.from_documents(
            (content_tokens(s.tokens) for d in tgt_docs.values() for s in d.sentences),
            k1=bm25_k1,
            b=bm25_b,
        )
        return make_scorer("bm25", stats=stats)
    if scorer in ("wmd", "rwmd"):
        if not vectors:
            raise click.UsageError(f"{scorer} needs --vectors")
        return make_scorer(scorer, table=load_word_vectors(vectors))
    return make_scorer(scorer)


@main.command("align-sents")
@click.option("--doc-pairs", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--source-corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target-corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scorer", default="cosine", show_default=True,
              type=click.Choice(["cosine", "overlap", "bm25", "wmd", "rwmd"]))
@click.option("--vectors", type=click.Path(exists=True, dir_okay=False))
@click.option("--source-sent-embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--target-sent-embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=5, show_default=True, type=int)
@click.option("--theta-s", required=True, type=float)
@click.option("--min-overlap", default=0.4, show_default=True, type=float)
@click.option("--max-len-ratio", default=1.5, show_default=True, type=float)
@click.option("--exclude", type=click.Path(exists=True, dir_okay=False),
              help="TSV of test-set pairs to exclude.")
@click.option("--filter-stage", default="group", show_default=True,
              type=click.Choice(["group", "pair"]))
@click.option("--bm25-k1", default=1.2, show_default=True, type=float)
@click.option("--bm25-b", default=0.75, show_default=True, type=float)
@click.option("--stopwords", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--tsv-out", type=click.Path(dir_okay=False),
              help="Also write source<TAB>target text pairs.")
def align_sents(doc_pairs, source_corpus, target_corpus, scorer, vectors,
                source_sent_embeddings, target_sent_embeddings, k, theta_s,
                min_overlap, max_len_ratio, exclude, filter_stage,
                bm25_k1, bm25_b, stopwords, out, tsv_out) -> None:
    """Stage 2: align sentences within document pairs and filter groups."""
    stops = load_stopwords(stopwords)
    src_docs = corpus_index(load_corpus(source_corpus, "src", stopwords=stops))
    tgt_docs = corpus_index(load_corpus(target_corpus, "tgt", stopwords=stops))
    pairs = read_doc_pairs(doc_pairs)
    scorer_obj = _build_cli_scorer(
        scorer, vectors, source_sent_embeddings, target_sent_embeddings,
        tgt_docs, bm25_k1, bm25_b,
    )
    policy = FilterPolicy(
        min_overlap=min_overlap,
        max_len_ratio=max_len_ratio,
        exclusion_set=load_exclusion_set(exclude) if exclude else frozenset(),
        stage=filter_stage,
    )
    groups = list(
        align_sentences(pairs, src_docs, tgt_docs, scorer_obj, k, theta_s,
                        policy, stops)
    )
    n = write_groups(groups, out)
    if tsv_out:
        write_groups_tsv(groups, tsv_out)
    logger.info("wrote %d aligned groups to %s", n, out)


@main.group("eval")
def eval_group() -> None:
    """Evaluation protocols against the labelled dataset."""


def _echo_report(report, include_timing: bool) -> None:
    click.echo(report.to_json(include_timing=include_timing))
    click.echo(report.table(), err=True)


_positive_labels_option = click.option(
    "--positive-labels", default="good", show_default=True,
    help="Comma-separated labels treated as positive.",
)


@eval_group.command("sent")
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scorer", default="cosine", show_default=True,
              type=click.Choice(["cosine", "overlap", "bm25", "wmd", "rwmd"]))
@click.option("--vectors", type=click.Path(exists=True, dir_okay=False))
@click.option("--sent-embeddings", type=click.Path(exists=True, dir_okay=False),
              help="Precomputed sentence embeddings covering both sides.")
@click.option("--bm25-k1", default=1.2, show_default=True, type=float)
@click.option("--bm25-b", default=0.75, show_default=True, type=float)
@_positive_labels_option
@click.option("--include-timing", is_flag=True)
def eval_sent(data_dir, scorer, vectors, sent_embeddings, bm25_k1, bm25_b,
              positive_labels, include_timing) -> None:
    """Sentence retrieval inside the gold article pairs."""
    dataset = load_eval_dataset(data_dir)
    if scorer == "cosine":
        if sent_embeddings:
            embedder = PrecomputedEmbedder(load_embeddings(sent_embeddings))
        elif vectors:
            embedder = AvgEmbedder(load_word_vectors(vectors))
        else:
            raise click.UsageError("cosine needs --vectors or --sent-embeddings")
        scorer_obj = CosineScorer(embedder)
    elif scorer == "bm25":
        stats = Bm25Stats.from_documents(
            (
                content_tokens(s.tokens)
                for d in dataset.tgt_docs.values()
                for s in d.sentences
            ),
            k1=bm25_k1,
            b=bm25_b,
        )
        scorer_obj = make_scorer("bm25", stats=stats)
    elif scorer in ("wmd", "rwmd"):
        if not vectors:
            raise click.UsageError(f"{scorer} needs --vectors")
        scorer_obj = make_scorer(scorer, table=load_word_vectors(vectors))
    else:
        scorer_obj = make_scorer(scorer)
    report = eval_sentence_alignment(
        dataset, scorer_obj, positive_labels=tuple(positive_labels.split(","))
    )
    _echo_report(report, include_timing)


@eval_group.command("doc")
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--vectors", type=click.Path(exists=True, dir_okay=False))
@click.option("--doc-embeddings", type=click.Path(exists=True, dir_okay=False),
              help="Precomputed document embeddings covering both sides.")
@click.option("--n-noise", default=1000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--include-timing", is_flag=True)
def eval_doc(data_dir, vectors, doc_embeddings, n_noise, seed, include_timing) -> None:
    """Document identification among noise articles."""
    dataset = load_eval_dataset(data_dir)
    if doc_embeddings:
        embedder = PrecomputedEmbedder(load_embeddings(doc_embeddings))
    elif vectors:
        embedder = AvgEmbedder(load_word_vectors(vectors))
    else:
        raise click.UsageError("needs --vectors or --doc-embeddings")
    report = eval_document_alignment(dataset, embedder=embedder, n_noise=n_noise, seed=seed)
    _echo_report(report, include_timing)


@eval_group.command("joint")
@click.option("--data-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", required=True, type=click.Choice(["lha", "global"]))
@click.option("--vectors", type=click.Path(exists=True, dir_okay=False))
@click.option("--doc-embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--sent-embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--k-doc", default=5, show_default=True, type=int)
@click.option("--theta-d", default=0.5, show_default=True, type=float)
@click.option("--rescore", default="none", show_default=True,
              type=click.Choice(["none", "wmd", "rwmd"]))
@click.option("--rescore-top", default=50, show_default=True, type=int)
@click.option("--global-top", default=50, show_default=True, type=int)
@click.option("--n-noise", default=1000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@_positive_labels_option
@click.option("--include-timing", is_flag=True)
def eval_joint_cmd(data_dir, mode, vectors, doc_embeddings, sent_embeddings,
                   k_doc, theta_d, rescore, rescore_top, global_top, n_noise,
                   seed, positive_labels, include_timing) -> None:
    """Hierarchical retrieval vs flat dataset-wide retrieval."""
    dataset = load_eval_dataset(data_dir)
    table = load_word_vectors(vectors) if vectors else None
    if sent_embeddings:
        sent_scorer = CosineScorer(PrecomputedEmbedder(load_embeddings(sent_embeddings)))
    elif table is not None:
        sent_scorer = CosineScorer(AvgEmbedder(table))
    else:
        raise click.UsageError("needs --vectors or --sent-embeddings")
    if doc_embeddings:
        doc_embedder = PrecomputedEmbedder(load_embeddings(doc_embeddings))
    elif table is not None:
        doc_embedder = AvgEmbedder(table)
    else:
        doc_embedder = None
    rescorer = None
    if rescore != "none":
        if table is None:
            raise click.UsageError(f"--rescore {rescore} needs --vectors")
        rescorer = make_scorer(rescore, table=table)
    report = eval_joint(
        mode,
        dataset,
        sent_scorer,
        doc_embedder=doc_embedder,
        k_doc=k_doc,
        theta_d=theta_d,
        n_noise=n_noise,
        seed=seed,
        rescorer=rescorer,
        rescore_top=rescore_top,
        global_top=global_top,
        positive_labels=tuple(positive_labels.split(",")),
    )
    _echo_report(report, include_timing)


def _load_config(config_path: str, overrides) -> PipelineConfig:
    try:
        return PipelineConfig.from_file(config_path).with_overrides(list(overrides))
    except ValueError as e:
        raise click.UsageError(str(e)) from e


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config key.")
def run(config_path, overrides) -> None:
    """Run the full pipeline from a JSON config file."""
    config = _load_config(config_path, overrides)
    try:
        summary = run_pipeline(config)
    except (ValueError, PipelineStageError) as e:
        raise click.ClickException(str(e)) from e
    click.echo(summary.to_json())


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def validate(config_path, overrides) -> None:
    """Validate a pipeline config; exit non-zero on errors."""
    config = _load_config(config_path, overrides)
    findings = validate_config(config)
    for level, message in findings:
        click.echo(f"{level}: {message}")
    if not findings:
        click.echo("ok")
    if any(level == "error" for level, _ in findings):
        sys.exit(1)


if __name__ == "__main__":
    main()
