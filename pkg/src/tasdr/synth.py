"""Synthetic topical corpus generator for desk-scale experiments.

Builds a corpus with real topical structure for topic-aware sampling to
exploit: T topics, each with its own token pool; per-topic queries; one
graded-relevant passage per query; same-topic filler passages (hard
negatives); and cross-topic passages (easy negatives).

True relevance is overlap on a *shared surface vocabulary*: every query
carries two surface tokens drawn from a global pool, its relevant passage
repeats them, and same-topic fillers carry other surface tokens plus the
same topic-token fraction as relevants. An untrained encoder cannot tell
surface overlap apart from topic/background noise; distillation teaches
the student to upweight surface features relative to topic features, a
pattern that transfers to held-out queries because the surface vocabulary
is shared across the whole corpus. Cross-topic margins, by contrast, are
satisfiable by cheap topic alignment alone.

Training pairs mix many easy cross-topic negatives with a few hard
same-topic ones, and the synthetic pairwise teacher scores each side from
its relevance grade and topic band plus noise. The resulting margin
distribution is skewed toward large easy margins — the skew that balanced
margin sampling is designed to undo: only the scarce hard pairs force the
surface-vs-topic contrast that decides within-topic ranking.

Queries are split deterministically into train / validation / test; the
validation and test sets are disjoint by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .corpus import (
    PassageStore,
    Qrels,
    QueryStore,
    TeacherScoreStore,
    TrainTriple,
    atomic_write_text,
)


@dataclass
class SyntheticData:
    queries: QueryStore
    passages: PassageStore
    qrels: Qrels
    triples: list[TrainTriple]
    scores: TeacherScoreStore
    train_query_ids: tuple[str, ...]
    val_query_ids: tuple[str, ...]
    test_query_ids: tuple[str, ...]
    topic_of_query: dict[str, int]

    def write_files(self, out_dir: str) -> dict[str, str]:
        """Emit the corpus as the standard TSV formats for CLI use."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "collection": os.path.join(out_dir, "collection.tsv"),
            "queries": os.path.join(out_dir, "queries.tsv"),
            "triples": os.path.join(out_dir, "triples.tsv"),
            "scores": os.path.join(out_dir, "scores.tsv"),
            "qrels": os.path.join(out_dir, "qrels.txt"),
        }
        atomic_write_text(
            paths["collection"],
            "".join(
                f"{pid}\t{' '.join(self.passages.tokens(pid))}\n"
                for pid in self.passages.ids()
            ),
        )
        atomic_write_text(
            paths["queries"],
            "".join(
                f"{qid}\t{' '.join(self.queries.tokens(qid))}\n"
                for qid in self.queries.ids()
            ),
        )
        atomic_write_text(
            paths["triples"],
            "".join(
                f"{t.query_id}\t{t.pos_id}\t{t.neg_id}\n" for t in self.triples
            ),
        )
        atomic_write_text(
            paths["scores"],
            "".join(
                f"{t.query_id}\t{t.pos_id}\t{t.neg_id}"
                f"\t{self.scores.lookup(t.query_id, t.pos_id):.6f}"
                f"\t{self.scores.lookup(t.query_id, t.neg_id):.6f}\n"
                for t in self.triples
            ),
        )
        qrels_lines = []
        for qid in self.queries.ids():
            for pid, grade in sorted(self.qrels.judged(qid).items()):
                qrels_lines.append(f"{qid} 0 {pid} {grade}\n")
        atomic_write_text(paths["qrels"], "".join(qrels_lines))
        split_lines = [
            f"{qid}\t{split}\n"
            for split, ids in (
                ("train", self.train_query_ids),
                ("val", self.val_query_ids),
                ("test", self.test_query_ids),
            )
            for qid in ids
        ]
        paths["splits"] = os.path.join(out_dir, "query_splits.tsv")
        atomic_write_text(paths["splits"], "".join(split_lines))
        return paths


def generate_synthetic_corpus(
    topics: int = 50,
    queries_per_topic: int = 40,
    n_passages: int = 4000,
    seed: int = 0,
    easy_pairs_per_query: int = 15,
    hard_pairs_per_query: int = 1,
    topic_vocab: int = 24,
    background_vocab: int = 120,
    surface_vocab: int = 500,
    val_fraction: float = 0.1,
    test_fraction: float = 0.15,
) -> SyntheticData:
    """Generate a topic-structured corpus with teacher-scored train pairs."""
    if topics < 2:
        raise ValueError("need at least 2 topics")
    n_queries = topics * queries_per_topic
    if n_passages < 2 * n_queries:
        raise ValueError(
            "need at least two passages per query (relevant + same-topic filler)"
        )
    rng = np.random.default_rng(seed)

    topic_tokens = [
        [f"t{t}w{j}" for j in range(topic_vocab)] for t in range(topics)
    ]
    background = [f"bg{j}" for j in range(background_vocab)]
    surface = [f"sv{j}" for j in range(surface_vocab)]

    queries: dict[str, tuple[str, ...]] = {}
    passages: dict[str, tuple[str, ...]] = {}
    qrels_grades: dict[tuple[str, str], int] = {}
    topic_of_query: dict[str, int] = {}
    relevant_of_query: dict[str, str] = {}
    fillers_by_topic: dict[int, list[str]] = {t: [] for t in range(topics)}

    # one relevant passage + one same-topic filler per query; any surplus
    # passage budget becomes extra fillers spread over topics
    extra_fillers = n_passages - 2 * n_queries

    partial_of_query: dict[str, str] = {}
    for t in range(topics):
        for i in range(queries_per_topic):
            qid = f"q{t}_{i}"
            topic_of_query[qid] = t
            sa, sb = (surface[int(j)] for j in rng.choice(surface_vocab, 2, replace=False))
            q_toks = tuple(rng.choice(topic_tokens[t], size=3)) + (sa, sb)
            queries[qid] = q_toks

            rel_id = f"p{t}_{i}"
            rel_toks = (
                tuple(rng.choice(topic_tokens[t], size=8))
                + (sa,) * 2
                + (sb,) * 2
                + tuple(rng.choice(background, size=4))
            )
            passages[rel_id] = tuple(rng.permutation(rel_toks))
            relevant_of_query[qid] = rel_id
            grade = 3 if rng.random() < 0.7 else 2
            qrels_grades[(qid, rel_id)] = grade

            # same topic-token fraction as the relevant passage (8/16), so
            # plain topic alignment cannot decide within-topic ranking;
            # shares one surface token -> partially relevant (grade 1)
            partial_id = f"f{t}_{i}"
            partial_toks = (
                tuple(rng.choice(topic_tokens[t], size=8))
                + (sa,)
                + tuple(surface[int(j)] for j in rng.choice(surface_vocab, 3))
                + tuple(rng.choice(background, size=4))
            )
            passages[partial_id] = tuple(rng.permutation(partial_toks))
            fillers_by_topic[t].append(partial_id)
            qrels_grades[(qid, partial_id)] = 1
            partial_of_query[qid] = partial_id

    for j in range(extra_fillers):
        t = j % topics
        filler_id = f"g{t}_{j}"
        filler_toks = (
            tuple(rng.choice(topic_tokens[t], size=8))
            + tuple(surface[int(i)] for i in rng.choice(surface_vocab, 4))
            + tuple(rng.choice(background, size=4))
        )
        passages[filler_id] = tuple(rng.permutation(filler_toks))
        fillers_by_topic[t].append(filler_id)

    # query splits: per topic, deterministic shuffled slices
    train_ids, val_ids, test_ids = [], [], []
    n_val = max(1, int(queries_per_topic * val_fraction))
    n_test = max(1, int(queries_per_topic * test_fraction))
    for t in range(topics):
        ids = [f"q{t}_{i}" for i in range(queries_per_topic)]
        order = rng.permutation(len(ids))
        shuffled = [ids[int(o)] for o in order]
        val_ids.extend(shuffled[:n_val])
        test_ids.extend(shuffled[n_val : n_val + n_test])
        train_ids.extend(shuffled[n_val + n_test :])

    def topic_of_passage(pid: str) -> int:
        return int(pid.split("_")[0][1:])

    def teacher_score(qid: str, pid: str) -> float:
        grade = qrels_grades.get((qid, pid), 0)
        same_topic = topic_of_query[qid] == topic_of_passage(pid)
        noise = float(rng.normal(0.0, 0.15))
        if grade == 3:
            return 4.6 + noise
        if grade == 2:
            return 3.9 + noise
        if grade == 1:
            return 2.6 + noise
        if same_topic:
            return float(rng.uniform(0.8, 2.2)) + noise
        return float(rng.uniform(-0.5, 0.4)) + noise

    relevants_by_topic: dict[int, list[str]] = {t: [] for t in range(topics)}
    for qid, t in topic_of_query.items():
        relevants_by_topic[t].append(relevant_of_query[qid])

    all_pids = list(passages)
    triples: list[TrainTriple] = []
    scores: dict[tuple[str, str], float] = {}
    for qid in train_ids:
        t = topic_of_query[qid]
        pos_id = relevant_of_query[qid]
        pos_score = teacher_score(qid, pos_id)
        negatives: list[str] = []
        same_topic_pool = fillers_by_topic[t] + [
            p for p in relevants_by_topic[t] if p != pos_id
        ]
        hard_picks = rng.choice(
            len(same_topic_pool),
            size=min(hard_pairs_per_query, len(same_topic_pool)),
            replace=False,
        )
        negatives.extend(same_topic_pool[int(i)] for i in hard_picks)
        while len(negatives) < hard_pairs_per_query + easy_pairs_per_query:
            cand = all_pids[int(rng.integers(len(all_pids)))]
            if topic_of_passage(cand) == t or cand == pos_id or cand in negatives:
                continue
            negatives.append(cand)
        for neg_id in negatives:
            triples.append(TrainTriple(qid, pos_id, neg_id))
            scores[(qid, pos_id)] = pos_score
            scores[(qid, neg_id)] = teacher_score(qid, neg_id)

    return SyntheticData(
        queries=QueryStore(queries, 30),
        passages=PassageStore(passages, 200),
        qrels=Qrels(qrels_grades),
        triples=triples,
        scores=TeacherScoreStore(scores),
        train_query_ids=tuple(train_ids),
        val_query_ids=tuple(val_ids),
        test_query_ids=tuple(test_ids),
        topic_of_query=topic_of_query,
    )
