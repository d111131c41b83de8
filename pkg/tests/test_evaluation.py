import math

import numpy as np
import pytest
from scipy import integrate

from tasdr.corpus import Qrels, Run
from tasdr.evaluation import (
    fuse_runs,
    mrr_at,
    ndcg_at,
    paired_t_test,
    recall_at,
    recall_curve,
    robustness_report,
)


def make_qrels(entries):
    return Qrels({(q, p): g for q, p, g in entries})


class TestNdcg:
    def test_ideal_ranking_is_one(self):
        qrels = make_qrels([("q1", "p1", 3)])
        run = Run.from_scores({"q1": [("p1", 9.0), ("p2", 1.0)]})
        assert ndcg_at(run, qrels, 10).per_query["q1"] == pytest.approx(1.0)

    def test_hand_computed_rank_two(self):
        # only relevant passage (grade 3) at rank 2:
        # DCG = 3/log2(3), IDCG = 3/log2(2) -> nDCG = 1/log2(3)
        qrels = make_qrels([("q1", "p2", 3)])
        run = Run.from_scores({"q1": [("p1", 9.0), ("p2", 1.0)]})
        expected = 1.0 / math.log2(3.0)
        value = ndcg_at(run, qrels, 10).per_query["q1"]
        assert value == pytest.approx(expected, abs=1e-9)
        assert value == pytest.approx(0.6309297535714574, abs=1e-9)

    def test_empty_run_scores_zero(self):
        qrels = make_qrels([("q1", "p1", 2)])
        run = Run.from_scores({"q1": []})
        assert ndcg_at(run, qrels, 10).per_query["q1"] == 0.0

    def test_no_relevant_query_excluded(self):
        qrels = make_qrels([("q1", "p1", 2), ("q2", "p9", 0)])
        run = Run.from_scores({"q1": [("p1", 1.0)], "q2": [("p9", 1.0)]})
        report = ndcg_at(run, qrels, 10)
        assert "q2" not in report.per_query
        assert report.aggregate == pytest.approx(1.0)

    def test_unjudged_run_query_warns(self):
        qrels = make_qrels([("q1", "p1", 2)])
        run = Run.from_scores({"q1": [("p1", 1.0)], "q9": [("p1", 1.0)]})
        with pytest.warns(UserWarning, match="q9"):
            ndcg_at(run, qrels, 10)

    def test_cutoff_validation(self):
        with pytest.raises(ValueError):
            ndcg_at(Run.from_scores({}), make_qrels([]), 0)


class TestMrr:
    def test_first_relevant_rank_three(self):
        qrels = make_qrels([("q1", "p3", 3)])
        run = Run.from_scores(
            {"q1": [("p1", 3.0), ("p2", 2.0), ("p3", 1.0)]}
        )
        assert mrr_at(run, qrels, 10).per_query["q1"] == pytest.approx(1 / 3)

    def test_relevant_below_cutoff_scores_zero(self):
        qrels = make_qrels([("q1", "p11", 3)])
        ranking = [(f"p{i}", 100.0 - i) for i in range(1, 12)]
        run = Run.from_scores({"q1": ranking})
        assert mrr_at(run, qrels, 10).per_query["q1"] == 0.0

    def test_binarization_threshold_two(self):
        # grade-1 at rank 1 does not count; grade-2 at rank 2 -> 0.5
        qrels = make_qrels([("q1", "p1", 1), ("q1", "p2", 2)])
        run = Run.from_scores({"q1": [("p1", 9.0), ("p2", 8.0)]})
        assert mrr_at(run, qrels, 10, binarization=2).per_query[
            "q1"
        ] == pytest.approx(0.5, abs=1e-9)

    def test_tail_permutation_invariance(self):
        qrels = make_qrels([("q1", "p1", 3)])
        base = [("p1", 10.0), ("pa", 3.0), ("pb", 2.0), ("pc", 1.0)]
        permuted = [("p1", 10.0), ("pc", 3.0), ("pa", 2.0), ("pb", 1.0)]
        a = mrr_at(Run.from_scores({"q1": base}), qrels, 3)
        b = mrr_at(Run.from_scores({"q1": permuted}), qrels, 3)
        assert a.per_query == b.per_query


class TestRecall:
    def test_all_within_cutoff(self):
        qrels = make_qrels([("q1", f"p{i}", 2) for i in range(4)])
        run = Run.from_scores({"q1": [(f"p{i}", 10.0 - i) for i in range(4)]})
        assert recall_at(run, qrels, 10).per_query["q1"] == pytest.approx(1.0)

    def test_one_of_four(self):
        qrels = make_qrels([("q1", f"p{i}", 2) for i in range(4)])
        run = Run.from_scores({"q1": [("p0", 5.0), ("x1", 4.0), ("x2", 3.0)]})
        assert recall_at(run, qrels, 10).per_query["q1"] == pytest.approx(0.25)

    def test_curve_monotone_non_decreasing(self):
        rng = np.random.default_rng(0)
        qrels = make_qrels(
            [("q1", f"p{i}", int(rng.integers(0, 4))) for i in range(30)]
        )
        run = Run.from_scores(
            {"q1": [(f"p{i}", float(rng.standard_normal())) for i in range(30)]}
        )
        curve = recall_curve(run, qrels, [1, 2, 5, 10, 20, 30])
        values = [v for _, v in curve]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def t_density(x, df):
    """Student-t pdf from the closed form, for the quadrature oracle."""
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


class TestPairedTTest:
    def test_identical_vectors(self):
        assert paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == 1.0

    def test_zero_variance_nonzero_mean(self):
        assert paired_t_test([2.0, 3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0]) == 0.0

    def test_textbook_case_against_quadrature_oracle(self):
        a = [1.1, 2.3, 3.1, 4.2, 5.0]
        b = [1.0, 2.0, 3.0, 4.0, 5.0]
        p = paired_t_test(a, b)

        # independent oracle: t statistic by hand + numerical integration
        # of the closed-form t density
        d = [x - y for x, y in zip(a, b)]
        n = len(d)
        mean = sum(d) / n
        sd = math.sqrt(sum((x - mean) ** 2 for x in d) / (n - 1))
        t_stat = mean / (sd / math.sqrt(n))
        tail, _ = integrate.quad(t_density, abs(t_stat), np.inf, args=(n - 1,))
        assert p == pytest.approx(2 * tail, abs=1e-9)
        assert 0.0 <= p <= 1.0

    def test_requires_two_observations(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [2.0])


class TestFuseRuns:
    def test_weight_one_restores_run_a_order(self):
        run_a = Run.from_scores(
            {"q1": [("p1", 7.0), ("p2", 3.0), ("p3", 1.0)]}
        )
        run_b = Run.from_scores({"q1": [("p9", 100.0), ("p2", 50.0)]})
        fused = fuse_runs(run_a, run_b, weight=1.0)
        got = [pid for pid, _ in fused.ranking("q1")]
        assert got[:3] == ["p1", "p2", "p3"]
        assert "p9" in got  # pool is the union; b-only passages tail at 0

    def test_convex_combination(self):
        run_a = Run.from_scores({"q1": [("shared", 5.0), ("a_only", 1.0)]})
        run_b = Run.from_scores({"q1": [("shared", 9.0), ("b_only", 2.0)]})
        fused = fuse_runs(run_a, run_b, weight=0.5)
        ranking = dict(fused.ranking("q1"))
        # shared normalizes to 1.0 in both runs -> fused 1.0, ranked first
        assert ranking["shared"] == pytest.approx(1.0)
        assert fused.ranking("q1")[0][0] == "shared"
        assert all(ranking[p] < 1.0 for p in ("a_only", "b_only"))

    def test_union_pool_recall_property(self):
        qrels = make_qrels([("q1", "ra", 2), ("q1", "rb", 2)])
        run_a = Run.from_scores({"q1": [("ra", 1.0), ("x", 0.5)]})
        run_b = Run.from_scores({"q1": [("rb", 1.0), ("y", 0.5)]})
        fused = fuse_runs(run_a, run_b, weight=0.5)
        big = 10_000  # effectively K = infinity
        r_f = recall_at(fused, qrels, big).aggregate
        assert r_f >= recall_at(run_a, qrels, big).aggregate
        assert r_f >= recall_at(run_b, qrels, big).aggregate
        assert r_f == pytest.approx(1.0)

    def test_rrf_alternative(self):
        run_a = Run.from_scores({"q1": [("p1", 2.0), ("p2", 1.0)]})
        run_b = Run.from_scores({"q1": [("p2", 2.0), ("p1", 1.0)]})
        fused = fuse_runs(run_a, run_b, weight=0.5, method="rrf")
        ranking = dict(fused.ranking("q1"))
        assert ranking["p1"] == pytest.approx(ranking["p2"])

    def test_weight_validation(self):
        run = Run.from_scores({})
        with pytest.raises(ValueError):
            fuse_runs(run, run, weight=1.5)


class TestRobustnessReport:
    def test_identical_instances_zero_stddev(self):
        report = robustness_report([{"ndcg": 0.5}, {"ndcg": 0.5}])
        assert report.stddev["ndcg"] == 0.0
        assert report.mean["ndcg"] == pytest.approx(0.5)

    def test_reference_five_instance_row(self):
        values = [0.712, 0.713, 0.716, 0.712, 0.705]
        report = robustness_report([{"ndcg_at_10": v} for v in values])
        assert round(report.mean["ndcg_at_10"], 3) == 0.712
        assert round(report.stddev["ndcg_at_10"], 3) == 0.004

    def test_single_instance_rejected(self):
        with pytest.raises(ValueError):
            robustness_report([{"m": 1.0}])

    def test_tsv_shape(self):
        report = robustness_report(
            [{"ndcg": 0.7, "mrr": 0.8}, {"ndcg": 0.72, "mrr": 0.82}]
        )
        lines = report.to_tsv().strip().splitlines()
        assert lines[0] == "instance\tndcg\tmrr"
        assert lines[1].startswith("A\t")
        assert lines[2].startswith("B\t")
        assert lines[3].startswith("Avg.\t")
        assert lines[4].startswith("StdDev.\t")
