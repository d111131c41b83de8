"""Training-batch composition: random, topic-aware, and margin-balanced.

Three strategies build batches of (query, positive, negative) tuples with
their pairwise teacher scores:

* ``random``: b distinct queries uniformly from the whole pool, one
  uniform pair each;
* ``tas``: n clusters uniformly, then floor(b/n) distinct queries from
  each, one uniform pair per query;
* ``tas-balanced``: TAS query selection, but the pair is drawn in two
  stages — a uniform choice among the query's non-empty margin bins, then
  a uniform pair within that bin — which unskews the pair distribution
  away from plentiful high-margin (easy) pairs.

Margin bins partition each query's teacher-margin span [min, max] into h
half-open ranges of equal width, the last bin closed at the top. A query
whose pairs all share one margin (or that has a single pair) gets bin
width 0 and everything in bin 0.

Queries never repeat within a batch (sampling without replacement per
batch) but do recur across batches: the stream is endless and never
repeats a batch by construction of fresh draws. Given one RNG seed, the
full batch sequence is reproducible byte for byte.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .clustering import TopicClusters
from .corpus import TeacherScoreStore, TrainTriple

CLUSTER_RESAMPLE_ATTEMPTS = 100


class PairSample(NamedTuple):
    pos_id: str
    neg_id: str
    t_pos: float
    t_neg: float

    @property
    def margin(self) -> float:
        return self.t_pos - self.t_neg


class BatchTuple(NamedTuple):
    query_id: str
    pos_id: str
    neg_id: str
    t_pos: float
    t_neg: float


@dataclass(frozen=True)
class Batch:
    tuples: tuple[BatchTuple, ...]
    strategy: str
    cluster_ids: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tuples)


class TrainingPool:
    """Per-query pair sets with teacher scores, indexed for sampling."""

    def __init__(self, pairs_by_query: dict[str, list[PairSample]]):
        self.pairs_by_query = pairs_by_query
        self.query_ids: list[str] = [q for q, p in pairs_by_query.items() if p]

    @classmethod
    def from_triples(
        cls, triples: Iterable[TrainTriple], scores: TeacherScoreStore
    ) -> "TrainingPool":
        pairs: dict[str, list[PairSample]] = {}
        for t in triples:
            pairs.setdefault(t.query_id, []).append(
                PairSample(
                    t.pos_id,
                    t.neg_id,
                    scores.lookup(t.query_id, t.pos_id),
                    scores.lookup(t.query_id, t.neg_id),
                )
            )
        return cls(pairs)

    def __len__(self) -> int:
        return len(self.query_ids)


@dataclass(frozen=True)
class BinnedPairs:
    """A query's pairs split into h equal-width teacher-margin ranges."""

    query_id: str
    m_min: float
    bin_width: float
    h: int
    bins: tuple[tuple[PairSample, ...], ...]
    nonempty: tuple[int, ...]

    def bin_of(self, margin: float) -> int:
        if self.bin_width == 0.0:
            return 0
        idx = int((margin - self.m_min) // self.bin_width)
        return min(max(idx, 0), self.h - 1)


def compute_margin_bins(
    query_id: str,
    pairs: Sequence[tuple[str, str]] | Sequence[PairSample],
    scores: TeacherScoreStore | None,
    h: int,
) -> BinnedPairs:
    """Bin a query's pairs by teacher margin into h equal-width ranges.

    Interval i covers [m_min + i*w, m_min + (i+1)*w) with the final bin
    closed at the top, so the maximum-margin pair lands in bin h-1.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    if not pairs:
        raise ValueError(f"query {query_id!r} has no pairs")
    samples: list[PairSample] = []
    for p in pairs:
        if isinstance(p, PairSample):
            samples.append(p)
        else:
            pos_id, neg_id = p
            assert scores is not None, "scores store required for raw id pairs"
            samples.append(
                PairSample(
                    pos_id,
                    neg_id,
                    scores.lookup(query_id, pos_id),
                    scores.lookup(query_id, neg_id),
                )
            )
    margins = [s.margin for s in samples]
    m_min = min(margins)
    m_max = max(margins)
    width = (m_max - m_min) / h if m_max > m_min else 0.0

    bins: list[list[PairSample]] = [[] for _ in range(h)]
    for s in samples:
        if width == 0.0:
            idx = 0
        else:
            idx = min(int((s.margin - m_min) // width), h - 1)
        bins[idx].append(s)
    frozen = tuple(tuple(b) for b in bins)
    nonempty = tuple(i for i, b in enumerate(frozen) if b)
    return BinnedPairs(query_id, m_min, width, h, frozen, nonempty)


def _uniform_pair(pairs: list[PairSample], rng: np.random.Generator) -> PairSample:
    return pairs[int(rng.integers(len(pairs)))]


def sample_random_batch(
    pool: TrainingPool, b: int, rng: np.random.Generator
) -> Batch:
    """b distinct queries uniformly, one uniform pair per query."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    if len(pool.query_ids) < b:
        raise ValueError(
            f"pool has {len(pool.query_ids)} queries with pairs, need {b}"
        )
    picks = rng.choice(len(pool.query_ids), size=b, replace=False)
    tuples = []
    for i in picks:
        qid = pool.query_ids[int(i)]
        pair = _uniform_pair(pool.pairs_by_query[qid], rng)
        tuples.append(BatchTuple(qid, *pair))
    return Batch(tuple(tuples), "random")


def _sampleable_members(
    pool: TrainingPool, clusters: TopicClusters
) -> list[list[str]]:
    """Cluster members restricted to queries that exist in the pool."""
    with_pairs = set(pool.query_ids)
    return [[q for q in m if q in with_pairs] for m in clusters.members]


def _pick_clusters(
    members: list[list[str]], n: int, need: int, rng: np.random.Generator
) -> list[int]:
    """n distinct clusters each holding >= need sampleable queries.

    Undersized picks are redrawn (up to a fixed attempt budget).
    """
    k = len(members)
    if n > k:
        raise ValueError(f"cannot sample {n} clusters from {k}")
    chosen: list[int] = []
    attempts = 0
    while len(chosen) < n:
        c = int(rng.integers(k))
        if c not in chosen and len(members[c]) >= need:
            chosen.append(c)
            continue
        attempts += 1
        if attempts > CLUSTER_RESAMPLE_ATTEMPTS:
            raise ValueError(
                f"no cluster with >= {need} sampleable queries found after "
                f"{CLUSTER_RESAMPLE_ATTEMPTS} attempts"
            )
    return chosen


def sample_tas_batch(
    pool: TrainingPool,
    clusters: TopicClusters,
    b: int,
    n: int,
    rng: np.random.Generator,
    members: list[list[str]] | None = None,
) -> Batch:
    """Topic-aware batch: floor(b/n) queries from each of n random clusters."""
    if n < 1:
        raise ValueError("n must be >= 1")
    per_cluster = b // n
    if per_cluster < 1:
        raise ValueError(f"b={b} too small for n={n} clusters")
    if members is None:
        members = _sampleable_members(pool, clusters)
    chosen = _pick_clusters(members, n, per_cluster, rng)
    tuples = []
    for c in chosen:
        ids = members[c]
        picks = rng.choice(len(ids), size=per_cluster, replace=False)
        for i in picks:
            qid = ids[int(i)]
            pair = _uniform_pair(pool.pairs_by_query[qid], rng)
            tuples.append(BatchTuple(qid, *pair))
    return Batch(tuple(tuples), "tas", tuple(chosen))


def sample_tas_balanced_batch(
    pool: TrainingPool,
    clusters: TopicClusters,
    binned: dict[str, BinnedPairs],
    b: int,
    n: int,
    h: int,
    rng: np.random.Generator,
    members: list[list[str]] | None = None,
) -> Batch:
    """TAS query selection plus two-stage margin-balanced pair selection."""
    if n < 1:
        raise ValueError("n must be >= 1")
    per_cluster = b // n
    if per_cluster < 1:
        raise ValueError(f"b={b} too small for n={n} clusters")
    if members is None:
        members = _sampleable_members(pool, clusters)
    chosen = _pick_clusters(members, n, per_cluster, rng)
    tuples = []
    for c in chosen:
        ids = members[c]
        picks = rng.choice(len(ids), size=per_cluster, replace=False)
        for i in picks:
            qid = ids[int(i)]
            bp = binned.get(qid)
            if bp is None or bp.h != h:
                bp = compute_margin_bins(qid, pool.pairs_by_query[qid], None, h)
                binned[qid] = bp
            bin_idx = bp.nonempty[int(rng.integers(len(bp.nonempty)))]
            pair = _uniform_pair(list(bp.bins[bin_idx]), rng)
            tuples.append(BatchTuple(qid, *pair))
    return Batch(tuple(tuples), "tas-balanced", tuple(chosen))


class BatchSampler:
    """Configured, endlessly callable batch source for one strategy."""

    STRATEGIES = ("random", "tas", "tas-balanced")

    def __init__(
        self,
        pool: TrainingPool,
        strategy: str,
        b: int,
        n: int = 1,
        h: int = 10,
        clusters: TopicClusters | None = None,
        seed: int = 0,
    ):
        if strategy not in self.STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        if strategy != "random" and clusters is None:
            raise ValueError(f"strategy {strategy!r} requires topic clusters")
        self.pool = pool
        self.strategy = strategy
        self.b = b
        self.n = n
        self.h = h
        self.clusters = clusters
        self._rng = np.random.default_rng(seed)
        self._members = (
            _sampleable_members(pool, clusters) if clusters is not None else None
        )
        self._binned: dict[str, BinnedPairs] = {}
        if strategy == "tas-balanced":
            for qid in pool.query_ids:
                self._binned[qid] = compute_margin_bins(
                    qid, pool.pairs_by_query[qid], None, h
                )

    def __call__(self) -> Batch:
        if self.strategy == "random":
            return sample_random_batch(self.pool, self.b, self._rng)
        if self.strategy == "tas":
            return sample_tas_batch(
                self.pool, self.clusters, self.b, self.n, self._rng, self._members
            )
        return sample_tas_balanced_batch(
            self.pool,
            self.clusters,
            self._binned,
            self.b,
            self.n,
            self.h,
            self._rng,
            self._members,
        )


class BatchQueue:
    """Producer/consumer feed of batches, or a direct single-threaded feed.

    In threaded mode one producer thread keeps up to ``capacity`` batches
    ready ahead of the consumer; batches arrive in production order, so for
    a given sampler seed the delivered sequence is identical to the
    single-threaded mode. A producer exception surfaces to the consumer as
    a terminal RuntimeError. ``close()`` (or exiting the context) stops the
    producer without leaks.
    """

    _POLL_SECONDS = 0.05

    def __init__(
        self,
        sampler: Callable[[], Batch],
        capacity: int = 4,
        threaded: bool = True,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._sampler = sampler
        self._threaded = threaded
        self._closed = False
        if threaded:
            self._queue: queue.Queue = queue.Queue(maxsize=capacity)
            self._stop = threading.Event()
            self._thread = threading.Thread(target=self._produce, daemon=True)
            self._thread.start()

    def _produce(self) -> None:
        while not self._stop.is_set():
            try:
                item = ("batch", self._sampler())
            except Exception as exc:  # surfaces to the consumer, then stops
                item = ("error", exc)
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=self._POLL_SECONDS)
                    break
                except queue.Full:
                    continue
            if item[0] == "error":
                return

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        if self._closed:
            raise RuntimeError("batch queue is closed")
        if not self._threaded:
            return self._sampler()
        kind, payload = self._queue.get()
        if kind == "error":
            self._closed = True
            raise RuntimeError("batch producer failed") from payload
        return payload

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._threaded:
            self._stop.set()
            while True:
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    break
            self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False


def batch_queue(
    sampler: Callable[[], Batch], capacity: int = 4, threaded: bool = True
) -> BatchQueue:
    """Wrap an endless sampler in a (optionally threaded) batch feed."""
    return BatchQueue(sampler, capacity=capacity, threaded=threaded)


def dump_batches_tsv(batches: Iterable[Batch], path: str) -> None:
    """Audit dump: one row per tuple with its batch index and strategy."""
    from .corpus import atomic_write_text

    lines = ["batch\tstrategy\tclusters\tquery_id\tpos_id\tneg_id\tt_pos\tt_neg"]
    for i, batch in enumerate(batches):
        clusters = ",".join(str(c) for c in batch.cluster_ids)
        for t in batch.tuples:
            lines.append(
                f"{i}\t{batch.strategy}\t{clusters}\t{t.query_id}\t{t.pos_id}"
                f"\t{t.neg_id}\t{t.t_pos:.6f}\t{t.t_neg:.6f}"
            )
    atomic_write_text(path, "\n".join(lines) + "\n")
