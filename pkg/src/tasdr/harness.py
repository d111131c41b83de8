"""Experiment harnesses: the teacher x sampling ablation grid and the
multi-seed randomization-robustness protocol.

Both follow one recipe: pretrain a pairwise baseline on random batches,
cluster the training queries with it, build the approximate validation
pool from it, then train each configuration with validation-based early
stopping and evaluate the best checkpoint by full retrieval over held-out
test queries. Everything derives from one global seed; robustness
instances vary only the sampling seed, never data, teachers, or the model
init, so the spread isolates batch-composition randomness.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .clustering import TopicClusters, cluster_queries
from .config import (
    SEED_OFFSET_CLUSTER,
    SEED_OFFSET_MODEL,
    SEED_OFFSET_SAMPLER,
    SEED_OFFSET_SYNTH,
    SEED_OFFSET_TEACHER,
    SEED_OFFSET_VALIDATION,
    PipelineConfig,
    component_seed,
)
from .corpus import (
    PassageStore,
    Qrels,
    QueryStore,
    Run,
    atomic_write_text,
    load_collection,
    load_qrels,
    load_queries,
    load_triples_with_scores,
)
from .encoder import StudentModel, TokenEmbeddingTable, encode_many
from .evaluation import (
    RobustnessReport,
    mrr_at,
    ndcg_at,
    recall_at,
    robustness_report,
)
from .index import batch_search, build_index
from .sampler import TrainingPool, dump_batches_tsv
from .synth import SyntheticData, generate_synthetic_corpus
from .training import (
    TrainConfig,
    TrainData,
    ValidationSet,
    build_validation_set,
    train,
)

TEACHER_GRID = ("pairwise", "inbatch", "dual")
STRATEGY_GRID = ("random", "tas", "tas-balanced")


@dataclass
class ExperimentSetup:
    """Shared one-time artifacts for a grid of training runs."""

    queries: QueryStore
    passages: PassageStore
    qrels: Qrels
    pool: TrainingPool
    teacher_table: TokenEmbeddingTable
    initial_model: StudentModel
    baseline_model: StudentModel
    clusters: TopicClusters
    validation: ValidationSet
    test_query_ids: tuple[str, ...]
    config: PipelineConfig


def _load_corpus(config: PipelineConfig):
    if config.synthetic:
        data = generate_synthetic_corpus(
            topics=config.topics,
            queries_per_topic=config.queries_per_topic,
            n_passages=config.n_passages,
            seed=component_seed(config.seed, SEED_OFFSET_SYNTH),
        )
        return data
    config.require_paths("collection", "queries", "triples", "scores", "qrels")
    queries = load_queries(config.queries)
    passages = load_collection(config.collection)
    triples, scores = load_triples_with_scores(
        config.triples, config.scores, queries, passages
    )
    qrels = load_qrels(config.qrels)
    judged = [q for q in queries.ids() if qrels.relevant_ids(q, 1)]
    rng = np.random.default_rng(component_seed(config.seed, SEED_OFFSET_VALIDATION))
    order = rng.permutation(len(judged))
    n_val = max(1, len(judged) // 10)
    n_test = max(1, (len(judged) * 15) // 100)
    val_ids = tuple(judged[int(i)] for i in order[:n_val])
    test_ids = tuple(judged[int(i)] for i in order[n_val : n_val + n_test])
    train_ids = tuple(judged[int(i)] for i in order[n_val + n_test :])
    return SyntheticData(
        queries=queries,
        passages=passages,
        qrels=qrels,
        triples=triples,
        scores=scores,
        train_query_ids=train_ids,
        val_query_ids=val_ids,
        test_query_ids=test_ids,
        topic_of_query={},
    )


def prepare_experiment(config: PipelineConfig) -> ExperimentSetup:
    """Corpus, pairwise baseline, clusters, and validation pool, all seeded."""
    data = _load_corpus(config)
    pool = TrainingPool.from_triples(data.triples, data.scores)
    table = TokenEmbeddingTable(
        d_tok=config.d_tok,
        seed=component_seed(config.seed, SEED_OFFSET_TEACHER),
        table_size=config.embedding_table_size,
    )
    initial_model = StudentModel.initialize(
        config.d_feat,
        config.d_emb,
        seed=component_seed(config.seed, SEED_OFFSET_MODEL),
        scale=config.init_scale,
    )

    baseline_cfg = TrainConfig(
        strategy="random",
        teacher_mode="pairwise",
        batch_size=config.batch_size,
        max_steps=config.baseline_steps,
        eval_interval_steps=10**9,
        learning_rate=config.learning_rate,
        d_feat=config.d_feat,
        d_emb=config.d_emb,
        seed=component_seed(config.seed, SEED_OFFSET_SAMPLER),
    )
    baseline = train(
        baseline_cfg,
        TrainData(
            query_store=data.queries,
            passage_store=data.passages,
            pool=pool,
            teacher_table=table,
            initial_model=initial_model,
        ),
    ).final_model

    train_store = QueryStore(
        {q: data.queries.tokens(q) for q in data.train_query_ids},
        data.queries.cap,
    )
    clusters = cluster_queries(
        baseline,
        train_store,
        k=config.k_clusters or None,
        seed=component_seed(config.seed, SEED_OFFSET_CLUSTER),
        max_iters=config.kmeans_max_iters,
    )
    validation = build_validation_set(
        baseline,
        data.queries,
        data.qrels,
        data.passages,
        sample_size=min(config.validation_sample, len(data.val_query_ids)),
        top_k=min(config.validation_top_k, len(data.passages)),
        seed=component_seed(config.seed, SEED_OFFSET_VALIDATION),
        query_ids=list(data.val_query_ids),
        exclude_query_ids=list(data.test_query_ids),
    )
    return ExperimentSetup(
        queries=data.queries,
        passages=data.passages,
        qrels=data.qrels,
        pool=pool,
        teacher_table=table,
        initial_model=initial_model,
        baseline_model=baseline,
        clusters=clusters,
        validation=validation,
        test_query_ids=data.test_query_ids,
        config=config,
    )


def evaluate_on_test(
    model: StudentModel, setup: ExperimentSetup, run_tag: str = "eval"
) -> tuple[dict[str, float], Run]:
    """Full retrieval over the test split: nDCG@10, MRR@10, recall@eval_k."""
    config = setup.config
    index = build_index(model, setup.passages)
    qids = list(setup.test_query_ids)
    vectors = encode_many(model, (setup.queries.tokens(q) for q in qids))
    results = batch_search(index, vectors, config.eval_k, n_threads=config.n_threads)
    run = Run.from_scores(
        {qid: res for qid, res in zip(qids, results)}, tag=run_tag
    )
    qrels = setup.qrels.subset(qids)
    metrics = {
        "ndcg_at_10": ndcg_at(run, qrels, 10).aggregate,
        "mrr_at_10": mrr_at(run, qrels, 10, config.binarization).aggregate,
        f"recall_at_{config.eval_k}": recall_at(
            run, qrels, config.eval_k, config.binarization
        ).aggregate,
    }
    return metrics, run


def run_training_cell(
    setup: ExperimentSetup,
    teacher_mode: str,
    strategy: str,
    instance: int = 0,
    inbatch_loss_kind: str = "margin-mse",
):
    """Train one grid cell with early stopping; returns its TrainResult."""
    config = setup.config
    cell_cfg = TrainConfig(
        alpha=config.alpha,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        clusters_per_batch=config.clusters_per_batch,
        margin_bins=config.margin_bins,
        strategy=strategy,
        teacher_mode=teacher_mode,
        inbatch_loss_kind=inbatch_loss_kind,
        max_steps=config.harness_max_steps,
        eval_interval_steps=config.harness_eval_interval,
        patience_evals=config.harness_patience,
        seed=component_seed(config.seed, SEED_OFFSET_SAMPLER, instance),
        d_feat=config.d_feat,
        d_emb=config.d_emb,
        queue_capacity=config.queue_capacity,
        threaded_queue=config.threaded_queue,
    )
    data = TrainData(
        query_store=setup.queries,
        passage_store=setup.passages,
        pool=setup.pool,
        teacher_table=setup.teacher_table,
        clusters=setup.clusters,
        validation=setup.validation,
        qrels=setup.qrels,
        initial_model=setup.initial_model,
    )
    return train(cell_cfg, data)


def run_ablation(config: PipelineConfig, out_dir: str) -> list[dict]:
    """Full teacher x sampling grid plus the untrained row, one seed."""
    setup = prepare_experiment(config)
    rows: list[dict] = []

    untrained_metrics, _ = evaluate_on_test(setup.initial_model, setup, "untrained")
    rows.append({"teacher": "none", "strategy": "untrained", **untrained_metrics})

    for teacher_mode in TEACHER_GRID:
        for strategy in STRATEGY_GRID:
            result = run_training_cell(setup, teacher_mode, strategy)
            metrics, _ = evaluate_on_test(
                result.model, setup, f"{teacher_mode}-{strategy}"
            )
            rows.append(
                {
                    "teacher": teacher_mode,
                    "strategy": strategy,
                    **metrics,
                    "best_step": result.best_step,
                    "steps_run": result.steps_run,
                }
            )

    metric_names = [k for k in rows[0] if k not in ("teacher", "strategy")]
    lines = ["teacher\tstrategy\t" + "\t".join(metric_names)]
    for row in rows:
        values = "\t".join(
            f"{row.get(m, float('nan')):.6f}"
            if isinstance(row.get(m), float)
            else str(row.get(m, ""))
            for m in metric_names
        )
        lines.append(f"{row['teacher']}\t{row['strategy']}\t{values}")
    atomic_write_text(os.path.join(out_dir, "ablation.tsv"), "\n".join(lines) + "\n")
    return rows


def run_trend_comparison(
    config: PipelineConfig, out_dir: str, n_seeds: int | None = None
) -> dict:
    """Per-seed dual-supervision comparison: balanced sampling vs random.

    Emits run artifacts (loss curves, batch dumps) for any seed where the
    balanced strategy loses, so regressions can be diagnosed from disk.
    """
    setup = prepare_experiment(config)
    n_seeds = n_seeds or config.harness_seeds
    untrained_metrics, _ = evaluate_on_test(setup.initial_model, setup, "untrained")

    per_seed = []
    for instance in range(n_seeds):
        row = {}
        results = {}
        for strategy in ("random", "tas-balanced"):
            result = run_training_cell(setup, "dual", strategy, instance=instance)
            metrics, _ = evaluate_on_test(
                result.model, setup, f"seed{instance}-{strategy}"
            )
            row[strategy] = metrics
            results[strategy] = result
        win = row["tas-balanced"]["ndcg_at_10"] >= row["random"]["ndcg_at_10"]
        per_seed.append({"instance": instance, "win": win, **{
            f"{s}_{m}": v for s, ms in row.items() for m, v in ms.items()
        }})
        if not win:
            diag_dir = os.path.join(out_dir, f"diagnostics_seed{instance}")
            for strategy, result in results.items():
                base = os.path.join(diag_dir, strategy.replace("-", "_"))
                os.makedirs(base, exist_ok=True)
                lines = ["step\tl_pair\tl_inbatch\tl_total"] + [
                    f"{s}\t{lp:.8f}\t{li:.8f}\t{lt:.8f}"
                    for s, lp, li, lt in result.loss_log
                ]
                atomic_write_text(os.path.join(base, "loss_curve.tsv"), "\n".join(lines) + "\n")
                from .sampler import BatchSampler

                sampler = BatchSampler(
                    setup.pool,
                    strategy,
                    config.batch_size,
                    n=config.clusters_per_batch,
                    h=config.margin_bins,
                    clusters=setup.clusters,
                    seed=component_seed(config.seed, SEED_OFFSET_SAMPLER, instance),
                )
                dump_batches_tsv(
                    (sampler() for _ in range(50)),
                    os.path.join(base, "batch_dump.tsv"),
                )

    wins = sum(1 for row in per_seed if row["win"])
    summary = {
        "untrained": untrained_metrics,
        "per_seed": per_seed,
        "wins": wins,
        "n_seeds": n_seeds,
    }
    lines = ["instance\twin\t" + "\t".join(k for k in per_seed[0] if k not in ("instance", "win"))]
    for row in per_seed:
        rest = "\t".join(
            f"{row[k]:.6f}" for k in row if k not in ("instance", "win")
        )
        lines.append(f"{row['instance']}\t{int(row['win'])}\t{rest}")
    lines.append(f"# wins {wins}/{n_seeds}; untrained ndcg_at_10 {untrained_metrics['ndcg_at_10']:.6f}")
    atomic_write_text(os.path.join(out_dir, "trend.tsv"), "\n".join(lines) + "\n")
    return summary


def run_robustness(
    config: PipelineConfig, out_dir: str, n_seeds: int | None = None
) -> RobustnessReport:
    """Multi-seed run of the main configuration; Avg/StdDev summary rows."""
    setup = prepare_experiment(config)
    n_seeds = n_seeds or config.harness_seeds
    instance_metrics = []
    for instance in range(n_seeds):
        result = run_training_cell(setup, "dual", "tas-balanced", instance=instance)
        metrics, _ = evaluate_on_test(result.model, setup, f"inst{instance}")
        instance_metrics.append(metrics)
    report = robustness_report(instance_metrics)
    atomic_write_text(os.path.join(out_dir, "robustness.tsv"), report.to_tsv())
    return report
