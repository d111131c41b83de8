"""Command-line pipeline: cluster, train, index, search, eval, fuse,
bench, synth, ablation, trend, robustness.

Every command reads one key=value config file (see config.py and the
README for keys); ``--seed`` and ``--out`` override the config. Outputs
are written atomically under the output directory, so an interrupted
command can simply be re-run. With one config and seed the whole pipeline
is deterministic end to end.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import _kernels
from .clustering import TopicClusters, cluster_queries
from .config import (
    SEED_OFFSET_CLUSTER,
    SEED_OFFSET_MODEL,
    SEED_OFFSET_SAMPLER,
    SEED_OFFSET_TEACHER,
    PipelineConfig,
    component_seed,
    load_config,
)
from .corpus import (
    Run,
    atomic_write_text,
    load_collection,
    load_qrels,
    load_queries,
    load_run,
    load_triples_with_scores,
    write_run,
)
from .encoder import StudentModel, TokenEmbeddingTable, encode_many
from .evaluation import (
    fuse_runs,
    mrr_at,
    ndcg_at,
    paired_t_test,
    recall_at,
    recall_curve,
    recall_curve_tsv,
)
from .harness import run_ablation, run_robustness, run_trend_comparison
from .index import DenseIndex, batch_search, build_index, latency_report
from .sampler import TrainingPool
from .synth import generate_synthetic_corpus
from .training import TrainConfig, TrainData, ValidationSet, train


def _config_from_args(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    return load_config(getattr(args, "config", None), overrides)


def _load_model_or_init(config: PipelineConfig, model_path: str | None) -> StudentModel:
    if model_path:
        return StudentModel.load(model_path)
    return StudentModel.initialize(
        config.d_feat,
        config.d_emb,
        seed=component_seed(config.seed, SEED_OFFSET_MODEL),
        scale=config.init_scale,
    )


def cmd_cluster(args) -> int:
    config = _config_from_args(args)
    config.require_paths("queries")
    model = _load_model_or_init(config, args.model)
    queries = load_queries(config.queries)
    out_path = os.path.join(config.out_dir, "clusters.bin")
    clusters = cluster_queries(
        model,
        queries,
        k=config.k_clusters or None,
        seed=component_seed(config.seed, SEED_OFFSET_CLUSTER),
        max_iters=config.kmeans_max_iters,
        out_path=out_path,
    )
    print(f"clustered {len(queries)} queries into k={clusters.k}: {out_path}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    config.require_paths("collection", "queries", "triples", "scores")
    queries = load_queries(config.queries)
    passages = load_collection(config.collection)
    triples, scores = load_triples_with_scores(
        config.triples, config.scores, queries, passages
    )
    pool = TrainingPool.from_triples(triples, scores)

    strategy = args.strategy or config.strategy
    teacher_mode = args.teacher or config.teacher_mode
    clusters = None
    if strategy in ("tas", "tas-balanced"):
        if not args.clusters:
            print("error: --clusters is required for topic-aware strategies", file=sys.stderr)
            return 2
        clusters = TopicClusters.load(args.clusters)

    validation = qrels = None
    if args.validation:
        validation = ValidationSet.load(args.validation)
        config.require_paths("qrels")
        qrels = load_qrels(config.qrels)

    train_cfg = TrainConfig(
        alpha=config.alpha,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        clusters_per_batch=config.clusters_per_batch,
        margin_bins=config.margin_bins,
        strategy=strategy,
        teacher_mode=teacher_mode,
        inbatch_loss_kind=config.inbatch_loss,
        max_steps=args.steps or config.max_steps,
        eval_interval_steps=config.eval_interval,
        patience_evals=config.patience,
        seed=component_seed(config.seed, SEED_OFFSET_SAMPLER),
        model_seed=component_seed(config.seed, SEED_OFFSET_MODEL),
        d_feat=config.d_feat,
        d_emb=config.d_emb,
        init_scale=config.init_scale,
        queue_capacity=config.queue_capacity,
        threaded_queue=config.threaded_queue,
    )
    data = TrainData(
        query_store=queries,
        passage_store=passages,
        pool=pool,
        teacher_table=TokenEmbeddingTable(
            d_tok=config.d_tok,
            seed=component_seed(config.seed, SEED_OFFSET_TEACHER),
            table_size=config.embedding_table_size,
        ),
        clusters=clusters,
        validation=validation,
        qrels=qrels,
        initial_model=StudentModel.load(args.model) if args.model else None,
    )
    if args.dump_batches:
        from .sampler import BatchSampler, dump_batches_tsv

        sampler = BatchSampler(
            pool,
            strategy,
            config.batch_size,
            n=config.clusters_per_batch,
            h=config.margin_bins,
            clusters=clusters,
            seed=train_cfg.seed,
        )
        dump_path = os.path.join(config.out_dir, "batch_dump.tsv")
        dump_batches_tsv((sampler() for _ in range(args.dump_batches)), dump_path)
        print(f"dumped {args.dump_batches} batches: {dump_path}")

    result = train(train_cfg, data, out_dir=config.out_dir)
    print(
        f"trained {result.steps_run} steps"
        f" (best step {result.best_step}, early stop: {result.stopped_early});"
        f" checkpoints + logs in {config.out_dir}"
    )
    return 0


def cmd_index(args) -> int:
    config = _config_from_args(args)
    config.require_paths("collection")
    model = StudentModel.load(args.model)
    passages = load_collection(config.collection)
    index = build_index(model, passages)
    out_path = os.path.join(config.out_dir, "index.bin")
    index.save(out_path)
    print(f"indexed {len(index)} passages ({index.d_emb} dims): {out_path}")
    return 0


def cmd_search(args) -> int:
    config = _config_from_args(args)
    config.require_paths("queries")
    index = DenseIndex.load(args.index)
    model = StudentModel.load(args.model)
    if model.checksum() != index.model_checksum:
        print(
            "warning: model checksum differs from the one the index was built with",
            file=sys.stderr,
        )
    queries = load_queries(config.queries)
    qids = queries.ids()
    vectors = encode_many(model, (queries.tokens(q) for q in qids))
    results = batch_search(index, vectors, args.k, n_threads=config.n_threads)
    run = Run.from_scores({q: r for q, r in zip(qids, results)}, tag=args.tag)
    out_path = args.out_run or os.path.join(config.out_dir, "run.txt")
    write_run(run, out_path)
    print(f"searched {len(qids)} queries (top {args.k}): {out_path}")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    run = load_run(args.run)
    qrels_path = args.qrels or config.qrels
    if not qrels_path:
        print("error: no qrels given (--qrels flag or config key)", file=sys.stderr)
        return 2
    qrels = load_qrels(qrels_path)
    cutoffs = config.cutoff_list()
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)

    reports = {}
    for cutoff in cutoffs:
        reports[f"ndcg_at_{cutoff}"] = ndcg_at(run, qrels, cutoff)
        reports[f"mrr_at_{cutoff}"] = mrr_at(run, qrels, cutoff, config.binarization)
        reports[f"recall_at_{cutoff}"] = recall_at(
            run, qrels, cutoff, config.binarization
        )
    for name, report in reports.items():
        report.save(os.path.join(out_dir, f"{name}.tsv"))
        print(f"{name}: {report.aggregate:.4f}")
    curve = recall_curve(run, qrels, cutoffs, config.binarization)
    atomic_write_text(os.path.join(out_dir, "recall_curve.tsv"), recall_curve_tsv(curve))

    if args.compare:
        other = load_run(args.compare)
        lines = ["metric\tp_value"]
        for name, report in reports.items():
            cutoff = int(name.rsplit("_", 1)[1])
            if name.startswith("ndcg"):
                other_report = ndcg_at(other, qrels, cutoff)
            elif name.startswith("mrr"):
                other_report = mrr_at(other, qrels, cutoff, config.binarization)
            else:
                other_report = recall_at(other, qrels, cutoff, config.binarization)
            shared = sorted(set(report.per_query) & set(other_report.per_query))
            if len(shared) >= 2:
                p = paired_t_test(
                    [report.per_query[q] for q in shared],
                    [other_report.per_query[q] for q in shared],
                )
                lines.append(f"{name}\t{p:.6g}")
        atomic_write_text(os.path.join(out_dir, "significance.tsv"), "\n".join(lines) + "\n")
        print(f"significance vs {args.compare}: {out_dir}/significance.tsv")
    return 0


def cmd_fuse(args) -> int:
    run_a = load_run(args.run_a)
    run_b = load_run(args.run_b)
    fused = fuse_runs(run_a, run_b, args.weight, method=args.method)
    write_run(fused, args.out_run, tag="fused")
    print(f"fused {args.run_a} + {args.run_b} (weight {args.weight}): {args.out_run}")
    return 0


def cmd_bench(args) -> int:
    config = _config_from_args(args)
    config.require_paths("collection", "queries")
    model = StudentModel.load(args.model) if args.model else _load_model_or_init(config, None)
    passages = load_collection(config.collection)
    queries = load_queries(config.queries)
    index = build_index(model, passages)
    batch_sizes = [int(b) for b in args.batch_sizes.split(",")]

    os.makedirs(config.out_dir, exist_ok=True)
    header = (
        "batch_size\tencode_avg_ms\tencode_p99_ms\tretrieve_avg_ms"
        "\tretrieve_p99_ms\ttotal_avg_ms\ttotal_p99_ms"
    )
    lines = [header]
    for b in batch_sizes:
        report = latency_report(
            index, model, queries, k=args.k, batch_size=b,
            repetitions=args.repetitions, n_threads=config.n_threads,
        )
        lines.append(report.to_tsv().splitlines()[1])
        print(f"batch {b}: total avg {report.rows['total'][0]:.2f} ms, "
              f"p99 {report.rows['total'][1]:.2f} ms")
    atomic_write_text(os.path.join(config.out_dir, "latency.tsv"), "\n".join(lines) + "\n")

    if args.compare_backends:
        lines = ["backend\tkernel\tavg_ms"]
        rng = np.random.default_rng(config.seed)
        mat = np.ascontiguousarray(rng.standard_normal((len(index), index.d_emb)))
        q = np.ascontiguousarray(rng.standard_normal(index.d_emb))
        qe = np.ascontiguousarray(rng.standard_normal((64, config.d_tok)))
        qo = np.arange(0, 65, 4, dtype=np.int64)[: 64 // 4 + 1]
        pe = np.ascontiguousarray(rng.standard_normal((600, config.d_tok)))
        po = np.arange(0, 601, 30, dtype=np.int64)
        cen = np.ascontiguousarray(rng.standard_normal((8, index.d_emb)))
        for name, backend in sorted(_kernels.available_backends().items()):
            for kernel, fn in (
                ("topk_dot", lambda be=backend: be.topk_dot(mat, q, min(100, len(index)))),
                ("late_interaction", lambda be=backend: be.late_interaction_scores(qe, qo, pe, po)),
                ("assign_nearest", lambda be=backend: be.assign_nearest(mat, cen)),
            ):
                fn()  # warm up
                t0 = time.perf_counter()
                reps = max(3, args.repetitions // 10)
                for _ in range(reps):
                    fn()
                avg_ms = (time.perf_counter() - t0) / reps * 1e3
                lines.append(f"{name}\t{kernel}\t{avg_ms:.4f}")
        atomic_write_text(
            os.path.join(config.out_dir, "backend_bench.tsv"), "\n".join(lines) + "\n"
        )
        print(f"backend comparison: {config.out_dir}/backend_bench.tsv")
    return 0


def cmd_synth(args) -> int:
    config = _config_from_args(args)
    from .config import SEED_OFFSET_SYNTH

    data = generate_synthetic_corpus(
        topics=config.topics,
        queries_per_topic=config.queries_per_topic,
        n_passages=config.n_passages,
        seed=component_seed(config.seed, SEED_OFFSET_SYNTH),
    )
    paths = data.write_files(config.out_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_ablation(args) -> int:
    config = _config_from_args(args)
    os.makedirs(config.out_dir, exist_ok=True)
    rows = run_ablation(config, config.out_dir)
    width = max(len(r["teacher"]) + len(r["strategy"]) for r in rows) + 4
    for row in rows:
        label = f"{row['teacher']}/{row['strategy']}"
        print(f"{label:<{width}} ndcg@10 {row['ndcg_at_10']:.4f}  "
              f"mrr@10 {row['mrr_at_10']:.4f}")
    print(f"grid written to {config.out_dir}/ablation.tsv")
    return 0


def cmd_trend(args) -> int:
    config = _config_from_args(args)
    os.makedirs(config.out_dir, exist_ok=True)
    summary = run_trend_comparison(config, config.out_dir, n_seeds=args.seeds)
    print(
        f"balanced >= random in {summary['wins']}/{summary['n_seeds']} seeds; "
        f"untrained ndcg@10 {summary['untrained']['ndcg_at_10']:.4f}"
    )
    return 0


def cmd_robustness(args) -> int:
    config = _config_from_args(args)
    os.makedirs(config.out_dir, exist_ok=True)
    report = run_robustness(config, config.out_dir, n_seeds=args.seeds)
    print(report.to_tsv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tasdr",
        description="Topic-aware, margin-balanced dense-retrieval training "
        "with dual-teacher distillation and exact retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("cluster", help="k-means the training queries into topics")
    common(p)
    p.add_argument("--model", help="encoder checkpoint (default: fresh init)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train the dual-encoder student")
    common(p)
    p.add_argument("--strategy", choices=["random", "tas", "tas-balanced"])
    p.add_argument("--teacher", choices=["pairwise", "inbatch", "dual"])
    p.add_argument("--clusters", help="cluster file from `tasdr cluster`")
    p.add_argument("--validation", help="validation pool TSV for early stopping")
    p.add_argument("--model", help="initial checkpoint (default: fresh init)")
    p.add_argument("--steps", type=int, help="override max training steps")
    p.add_argument(
        "--dump-batches",
        type=int,
        default=0,
        metavar="N",
        help="also write the first N sampled batches as an audit TSV",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="encode and index the passage collection")
    common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="retrieve top-k passages for all queries")
    common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--tag", default="tasdr")
    p.add_argument("--out-run", help="run file path (default: <out>/run.txt)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a run file against qrels")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels")
    p.add_argument("--compare", help="second run for paired significance tests")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="fuse two run files")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--weight", type=float, default=0.5)
    p.add_argument("--method", choices=["minmax", "rrf"], default="minmax")
    p.add_argument("--out-run", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("bench", help="latency report (and backend comparison)")
    common(p)
    p.add_argument("--model", help="encoder checkpoint (default: fresh init)")
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--batch-sizes", default="1,10,100")
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--compare-backends", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write the built-in synthetic corpus as TSVs")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablation", help="teacher x sampling grid on one seed")
    common(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("trend", help="multi-seed balanced-vs-random comparison")
    common(p)
    p.add_argument("--seeds", type=int)
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("robustness", help="multi-seed robustness table")
    common(p)
    p.add_argument("--seeds", type=int)
    p.set_defaults(func=cmd_robustness)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
