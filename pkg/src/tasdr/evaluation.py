"""IR metrics with TREC conventions, significance, fusion, robustness.

Conventions: nDCG gain is the raw grade with a 1/log2(rank+1) discount
(trec_eval default, not the exponential gain); MRR and recall binarize at
a grade threshold (default 2). For each metric, queries with no relevant
passage under that metric's own notion of relevance are excluded from the
aggregate mean. Queries present in the run but absent from the qrels are
skipped with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .corpus import Qrels, Run, atomic_write_text

BINARIZATION_DEFAULT = 2


@dataclass
class MetricReport:
    """Per-query metric values plus their unweighted mean."""

    metric: str
    cutoff: int
    binarization: int | None
    per_query: dict[str, float]

    @property
    def aggregate(self) -> float:
        if not self.per_query:
            return 0.0
        return float(np.mean(list(self.per_query.values())))

    def to_tsv(self) -> str:
        lines = [f"{qid}\t{value:.6f}" for qid, value in self.per_query.items()]
        lines.append(f"aggregate\t{self.aggregate:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        atomic_write_text(path, self.to_tsv())


def _warn_unjudged(run: Run, qrels: Qrels) -> None:
    judged = set(qrels.query_ids())
    unjudged = [qid for qid in run.query_ids() if qid not in judged]
    if unjudged:
        warnings.warn(
            f"skipping {len(unjudged)} run queries missing from qrels "
            f"(first: {unjudged[0]!r})"
        )


def ndcg_at(run: Run, qrels: Qrels, cutoff: int) -> MetricReport:
    """Graded nDCG at a cutoff; ideal ranking from the sorted grades."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    _warn_unjudged(run, qrels)
    per_query: dict[str, float] = {}
    for qid in qrels.query_ids():
        judged = qrels.judged(qid)
        grades = sorted((g for g in judged.values() if g > 0), reverse=True)
        if not grades:
            continue  # nothing relevant: excluded from the aggregate
        dcg = 0.0
        for rank, (pid, _) in enumerate(run.ranking(qid)[:cutoff], start=1):
            gain = judged.get(pid, 0)
            if gain > 0:
                dcg += gain / math.log2(rank + 1)
        idcg = sum(
            g / math.log2(rank + 1)
            for rank, g in enumerate(grades[:cutoff], start=1)
        )
        per_query[qid] = dcg / idcg
    return MetricReport("ndcg", cutoff, None, per_query)


def mrr_at(
    run: Run, qrels: Qrels, cutoff: int, binarization: int = BINARIZATION_DEFAULT
) -> MetricReport:
    """Reciprocal rank of the first passage at or above the grade threshold."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    _warn_unjudged(run, qrels)
    per_query: dict[str, float] = {}
    for qid in qrels.query_ids():
        relevant = qrels.relevant_ids(qid, binarization)
        if not relevant:
            continue
        value = 0.0
        for rank, (pid, _) in enumerate(run.ranking(qid)[:cutoff], start=1):
            if pid in relevant:
                value = 1.0 / rank
                break
        per_query[qid] = value
    return MetricReport("mrr", cutoff, binarization, per_query)


def recall_at(
    run: Run, qrels: Qrels, cutoff: int, binarization: int = BINARIZATION_DEFAULT
) -> MetricReport:
    """Fraction of relevant passages retrieved within the cutoff."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    _warn_unjudged(run, qrels)
    per_query: dict[str, float] = {}
    for qid in qrels.query_ids():
        relevant = qrels.relevant_ids(qid, binarization)
        if not relevant:
            continue
        retrieved = {pid for pid, _ in run.ranking(qid)[:cutoff]}
        per_query[qid] = len(retrieved & relevant) / len(relevant)
    return MetricReport("recall", cutoff, binarization, per_query)


def recall_curve(
    run: Run,
    qrels: Qrels,
    cutoffs: list[int],
    binarization: int = BINARIZATION_DEFAULT,
) -> list[tuple[int, float]]:
    """Aggregate recall at each cutoff, for recall-vs-depth plots."""
    return [
        (c, recall_at(run, qrels, c, binarization).aggregate) for c in cutoffs
    ]


def recall_curve_tsv(curve: list[tuple[int, float]]) -> str:
    lines = ["cutoff\trecall"] + [f"{c}\t{r:.6f}" for c, r in curve]
    return "\n".join(lines) + "\n"


def paired_t_test(per_query_a, per_query_b) -> float:
    """Two-sided paired t-test p-value over aligned per-query values.

    Degenerate conventions: all-zero differences give p = 1.0; zero
    variance with a nonzero mean gives p = 0.0.
    """
    a = np.asarray(per_query_a, dtype=np.float64)
    b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need equal-length aligned 1-D vectors")
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least 2 paired observations")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t_stat = mean / (sd / math.sqrt(n))
    return float(2.0 * stats.t.sf(abs(t_stat), df=n - 1))


def _minmax_normalize(ranking: list[tuple[str, float]]) -> dict[str, float]:
    if not ranking:
        return {}
    scores = [s for _, s in ranking]
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return {pid: 1.0 for pid, _ in ranking}
    return {pid: (s - lo) / (hi - lo) for pid, s in ranking}


def fuse_runs(
    run_a: Run,
    run_b: Run,
    weight: float,
    method: str = "minmax",
    rrf_k: int = 60,
) -> Run:
    """Fuse two runs per query over the union of their candidate pools.

    ``minmax``: each run's scores are min-max normalized to [0, 1] per
    query (a passage missing from one run scores 0 there) and combined as
    ``weight * a + (1 - weight) * b``. ``rrf``: reciprocal-rank fusion
    ``weight/(rrf_k + rank_a) + (1-weight)/(rrf_k + rank_b)``. Weight 1
    restores run_a's relative order on run_a's pool (run_b-only passages
    tie at zero behind it).
    """
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must be in [0, 1]")
    if method not in ("minmax", "rrf"):
        raise ValueError(f"unknown fusion method {method!r}")
    fused: dict[str, list[tuple[str, float]]] = {}
    for qid in sorted(set(run_a.query_ids()) | set(run_b.query_ids())):
        rank_a = run_a.ranking(qid)
        rank_b = run_b.ranking(qid)
        if method == "minmax":
            norm_a = _minmax_normalize(rank_a)
            norm_b = _minmax_normalize(rank_b)
        else:
            norm_a = {pid: 1.0 / (rrf_k + r) for r, (pid, _) in enumerate(rank_a, 1)}
            norm_b = {pid: 1.0 / (rrf_k + r) for r, (pid, _) in enumerate(rank_b, 1)}
        pool = set(norm_a) | set(norm_b)
        fused[qid] = [
            (pid, weight * norm_a.get(pid, 0.0) + (1.0 - weight) * norm_b.get(pid, 0.0))
            for pid in sorted(pool)
        ]
    return Run.from_scores(fused, tag="fused")


@dataclass
class RobustnessReport:
    """Per-instance metric rows plus Avg. and StdDev. summary rows."""

    instances: list[str]
    metrics: list[str]
    values: dict[str, dict[str, float]]  # instance -> metric -> value

    @property
    def mean(self) -> dict[str, float]:
        return {
            m: float(np.mean([self.values[i][m] for i in self.instances]))
            for m in self.metrics
        }

    @property
    def stddev(self) -> dict[str, float]:
        return {
            m: float(np.std([self.values[i][m] for i in self.instances], ddof=1))
            for m in self.metrics
        }

    def to_tsv(self) -> str:
        lines = ["instance\t" + "\t".join(self.metrics)]
        for inst in self.instances:
            row = "\t".join(f"{self.values[inst][m]:.6f}" for m in self.metrics)
            lines.append(f"{inst}\t{row}")
        lines.append(
            "Avg.\t" + "\t".join(f"{self.mean[m]:.6f}" for m in self.metrics)
        )
        lines.append(
            "StdDev.\t" + "\t".join(f"{self.stddev[m]:.6f}" for m in self.metrics)
        )
        return "\n".join(lines) + "\n"


def robustness_report(
    instance_metrics: list[dict[str, float]],
    instance_labels: list[str] | None = None,
) -> RobustnessReport:
    """Mean and sample standard deviation (ddof=1) across >= 2 instances."""
    if len(instance_metrics) < 2:
        raise ValueError("need at least 2 instances for a robustness report")
    metrics = list(instance_metrics[0])
    for m in instance_metrics[1:]:
        if list(m) != metrics:
            raise ValueError("instances report different metric sets")
    if instance_labels is None:
        instance_labels = [chr(ord("A") + i) for i in range(len(instance_metrics))]
    values = {
        label: dict(metrics_row)
        for label, metrics_row in zip(instance_labels, instance_metrics)
    }
    return RobustnessReport(list(instance_labels), metrics, values)
