import numpy as np
import pytest

from tasdr.clustering import TopicClusters
from tasdr.corpus import TeacherScoreStore, TrainTriple
from tasdr.sampler import (
    BatchSampler,
    PairSample,
    TrainingPool,
    batch_queue,
    compute_margin_bins,
    sample_random_batch,
    sample_tas_balanced_batch,
    sample_tas_batch,
)


def make_pool(n_queries, pairs_per_query=3, margin_fn=None):
    pairs = {}
    for i in range(n_queries):
        qid = f"q{i}"
        plist = []
        for j in range(pairs_per_query):
            margin = margin_fn(i, j) if margin_fn else 4.0 + j
            plist.append(PairSample(f"p{i}_pos{j}", f"p{i}_neg{j}", 10.0, 10.0 - margin))
        pairs[qid] = plist
    return TrainingPool(pairs)


def make_clusters(n_queries, k):
    assignment = {f"q{i}": i % k for i in range(n_queries)}
    members = [[] for _ in range(k)]
    for qid, c in assignment.items():
        members[c].append(qid)
    return TopicClusters(np.zeros((k, 4)), assignment, members)


class TestMarginBins:
    def _pairs(self, margins):
        return [PairSample(f"p{i}", f"n{i}", 10.0, 10.0 - m) for i, m in enumerate(margins)]

    def test_bin_arithmetic(self):
        margins = [1.0 + i for i in range(11)]  # 1.0 .. 11.0
        binned = compute_margin_bins("q", self._pairs(margins + [3.4]), None, h=10)
        assert binned.bin_width == pytest.approx(1.0)
        assert binned.bin_of(3.4) == 2
        # the 3.4-margin pair really sits in bin 2
        assert any(p.margin == pytest.approx(3.4) for p in binned.bins[2])

    def test_max_margin_in_top_bin(self):
        margins = [1.0 + i for i in range(11)]
        binned = compute_margin_bins("q", self._pairs(margins), None, h=10)
        assert binned.bin_of(11.0) == 9
        assert any(p.margin == pytest.approx(11.0) for p in binned.bins[9])

    def test_degenerate_single_margin(self):
        binned = compute_margin_bins("q", self._pairs([2.0, 2.0, 2.0]), None, h=10)
        assert binned.bin_width == 0.0
        assert len(binned.bins[0]) == 3
        assert binned.nonempty == (0,)

    def test_every_pair_in_exactly_one_bin(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            margins = rng.uniform(-5, 15, size=rng.integers(1, 40)).tolist()
            h = int(rng.integers(1, 12))
            binned = compute_margin_bins("q", self._pairs(margins), None, h=h)
            assert sum(len(b) for b in binned.bins) == len(margins)


class TestRandomBatch:
    def test_exhaustion(self):
        pool = make_pool(8)
        batch = sample_random_batch(pool, 8, np.random.default_rng(0))
        assert sorted(t.query_id for t in batch.tuples) == sorted(pool.query_ids)

    def test_b_one(self):
        pool = make_pool(5)
        batch = sample_random_batch(pool, 1, np.random.default_rng(1))
        assert len(batch) == 1

    def test_pool_too_small(self):
        pool = make_pool(3)
        with pytest.raises(ValueError, match="need 4"):
            sample_random_batch(pool, 4, np.random.default_rng(0))

    def test_uniform_selection_frequency(self):
        pool = make_pool(10)
        rng = np.random.default_rng(42)
        counts = {qid: 0 for qid in pool.query_ids}
        draws = 100_000
        for _ in range(draws):
            for t in sample_random_batch(pool, 2, rng).tuples:
                counts[t.query_id] += 1
        for qid in counts:
            # probability a given query is selected into a batch: b/|Q| = 0.2
            freq = counts[qid] / draws
            assert abs(freq - 0.2) < 0.01


class TestTasBatch:
    def test_n1_single_cluster(self):
        pool = make_pool(200)
        clusters = make_clusters(200, 4)
        rng = np.random.default_rng(3)
        batch = sample_tas_batch(pool, clusters, 32, 1, rng)
        assert len(batch) == 32
        src = {clusters.assignment[t.query_id] for t in batch.tuples}
        assert len(src) == 1
        assert batch.cluster_ids == tuple(src)

    def test_n_equals_b(self):
        pool = make_pool(64)
        clusters = make_clusters(64, 16)
        rng = np.random.default_rng(4)
        batch = sample_tas_batch(pool, clusters, 8, 8, rng)
        assert len(batch) == 8
        assert len(set(batch.cluster_ids)) == 8

    def test_n2_split(self):
        pool = make_pool(200)
        clusters = make_clusters(200, 5)
        rng = np.random.default_rng(5)
        batch = sample_tas_batch(pool, clusters, 32, 2, rng)
        assert len(batch) == 32
        by_cluster = {}
        for t in batch.tuples:
            by_cluster.setdefault(clusters.assignment[t.query_id], []).append(t)
        assert sorted(len(v) for v in by_cluster.values()) == [16, 16]

    def test_no_repeats_within_batch(self):
        pool = make_pool(100)
        clusters = make_clusters(100, 3)
        rng = np.random.default_rng(6)
        for _ in range(50):
            batch = sample_tas_batch(pool, clusters, 16, 1, rng)
            qids = [t.query_id for t in batch.tuples]
            assert len(qids) == len(set(qids))

    def test_undersized_clusters_resampled_then_error(self):
        pool = make_pool(10)
        # one big cluster, one tiny
        assignment = {f"q{i}": (0 if i < 9 else 1) for i in range(10)}
        members = [[f"q{i}" for i in range(9)], ["q9"]]
        clusters = TopicClusters(np.zeros((2, 4)), assignment, members)
        rng = np.random.default_rng(7)
        batch = sample_tas_batch(pool, clusters, 8, 1, rng)
        assert batch.cluster_ids == (0,)
        with pytest.raises(ValueError, match="attempts"):
            sample_tas_batch(pool, clusters, 40, 1, rng)


class TestTasBalancedBatch:
    def test_unskews_bin_selection(self):
        # one query: 99 pairs in bin 0, 1 pair in bin 9
        margins = [1.0 + 0.004 * i for i in range(99)] + [11.0]
        pairs = {
            "q0": [
                PairSample(f"p{i}", f"n{i}", 11.0, 11.0 - m)
                for i, m in enumerate(margins)
            ]
        }
        pool = TrainingPool(pairs)
        clusters = TopicClusters(np.zeros((1, 4)), {"q0": 0}, [["q0"]])
        binned = {"q0": compute_margin_bins("q0", pairs["q0"], None, 10)}
        assert [len(b) for b in binned["q0"].bins] == [99, 0, 0, 0, 0, 0, 0, 0, 0, 1]

        rng = np.random.default_rng(8)
        hi = 0
        draws = 10_000
        for _ in range(draws):
            batch = sample_tas_balanced_batch(pool, clusters, binned, 1, 1, 10, rng)
            if binned["q0"].bin_of(batch.tuples[0].t_pos - batch.tuples[0].t_neg) == 9:
                hi += 1
        assert abs(hi / draws - 0.5) < 0.03

    def test_single_nonempty_bin_equals_tas_selection(self):
        pool = make_pool(20, pairs_per_query=4, margin_fn=lambda i, j: 5.0)
        clusters = make_clusters(20, 2)
        rng = np.random.default_rng(9)
        batch = sample_tas_balanced_batch(pool, clusters, {}, 8, 1, 10, rng)
        assert len(batch) == 8
        assert batch.strategy == "tas-balanced"

    def test_h1_equivalent_to_tas_pair_choice(self):
        pool = make_pool(30, pairs_per_query=5)
        clusters = make_clusters(30, 3)
        b1 = sample_tas_balanced_batch(
            pool, clusters, {}, 8, 1, 1, np.random.default_rng(10)
        )
        b2 = sample_tas_batch(pool, clusters, 8, 1, np.random.default_rng(10))
        # identical RNG consumption path? not guaranteed; instead check the
        # h=1 bin draw is degenerate: with one bin the pair set equals P_q
        binned = compute_margin_bins("q0", pool.pairs_by_query["q0"], None, 1)
        assert binned.nonempty == (0,)
        assert set(binned.bins[0]) == set(pool.pairs_by_query["q0"])
        assert len(b1) == len(b2) == 8

    def test_bin_membership_recomputable(self):
        pool = make_pool(50, pairs_per_query=6, margin_fn=lambda i, j: 1.0 + i % 7 + j)
        clusters = make_clusters(50, 5)
        sampler = BatchSampler(
            pool, "tas-balanced", b=8, n=1, h=10, clusters=clusters, seed=11
        )
        scores = TeacherScoreStore(
            {
                (qid, pid): s
                for qid, plist in pool.pairs_by_query.items()
                for p in plist
                for pid, s in ((p.pos_id, p.t_pos), (p.neg_id, p.t_neg))
            }
        )
        for _ in range(20):
            batch = sampler()
            for t in batch.tuples:
                margin = scores.lookup(t.query_id, t.pos_id) - scores.lookup(
                    t.query_id, t.neg_id
                )
                bp = compute_margin_bins(
                    t.query_id, pool.pairs_by_query[t.query_id], None, 10
                )
                idx = bp.bin_of(margin)
                assert any(
                    p.pos_id == t.pos_id and p.neg_id == t.neg_id
                    for p in bp.bins[idx]
                )


class TestReproducibility:
    def test_same_seed_identical_sequences(self):
        pool = make_pool(60, pairs_per_query=4)
        clusters = make_clusters(60, 6)
        s1 = BatchSampler(pool, "tas-balanced", 8, 1, 10, clusters, seed=21)
        s2 = BatchSampler(pool, "tas-balanced", 8, 1, 10, clusters, seed=21)
        seq1 = [s1() for _ in range(25)]
        seq2 = [s2() for _ in range(25)]
        assert seq1 == seq2

    def test_triples_pool_construction(self):
        triples = [TrainTriple("q1", "a", "b"), TrainTriple("q1", "a", "c")]
        scores = TeacherScoreStore(
            {("q1", "a"): 9.0, ("q1", "b"): 2.0, ("q1", "c"): 5.0}
        )
        pool = TrainingPool.from_triples(triples, scores)
        assert pool.query_ids == ["q1"]
        assert pool.pairs_by_query["q1"][0].margin == pytest.approx(7.0)


class TestBatchQueue:
    def test_capacity_one_lockstep_order(self):
        pool = make_pool(20)
        sampler = BatchSampler(pool, "random", 4, seed=30)
        reference = BatchSampler(pool, "random", 4, seed=30)
        expected = [reference() for _ in range(10)]
        with batch_queue(sampler, capacity=1, threaded=True) as q:
            got = [next(q) for _ in range(10)]
        assert got == expected

    def test_consumer_stop_no_hang(self):
        pool = make_pool(20)
        sampler = BatchSampler(pool, "random", 4, seed=31)
        q = batch_queue(sampler, capacity=2, threaded=True)
        for _ in range(5):
            next(q)
        q.close()
        assert not q._thread.is_alive()

    def test_producer_error_surfaces(self):
        calls = {"n": 0}

        def failing():
            calls["n"] += 1
            raise RuntimeError("boom")

        q = batch_queue(failing, capacity=1, threaded=True)
        with pytest.raises(RuntimeError, match="producer failed"):
            next(q)
        q.close()

    def test_threaded_matches_single_threaded(self):
        pool = make_pool(40, pairs_per_query=3)
        clusters = make_clusters(40, 4)
        threaded_src = batch_queue(
            BatchSampler(pool, "tas", 8, 1, 10, clusters, seed=32),
            capacity=3,
            threaded=True,
        )
        direct_src = batch_queue(
            BatchSampler(pool, "tas", 8, 1, 10, clusters, seed=32),
            capacity=3,
            threaded=False,
        )
        with threaded_src:
            a = [next(threaded_src) for _ in range(15)]
        b = [next(direct_src) for _ in range(15)]
        assert a == b
