import pytest

from tasdr.config import PipelineConfig
from tasdr.harness import prepare_experiment, run_ablation, run_robustness
from tasdr.synth import generate_synthetic_corpus


class TestSyntheticCorpus:
    def test_sizes_and_splits(self):
        data = generate_synthetic_corpus(
            topics=8, queries_per_topic=10, n_passages=200, seed=1
        )
        assert len(data.queries) == 80
        assert len(data.passages) == 200
        splits = (
            set(data.train_query_ids)
            | set(data.val_query_ids)
            | set(data.test_query_ids)
        )
        assert len(splits) == 80
        assert not set(data.val_query_ids) & set(data.test_query_ids)
        assert not set(data.train_query_ids) & set(data.test_query_ids)

    def test_every_query_has_relevant_and_partial(self):
        data = generate_synthetic_corpus(
            topics=4, queries_per_topic=5, n_passages=60, seed=2
        )
        for qid in data.queries.ids():
            judged = data.qrels.judged(qid)
            grades = sorted(judged.values(), reverse=True)
            assert grades[0] in (2, 3)
            assert 1 in grades

    def test_triples_cover_only_train_queries(self):
        data = generate_synthetic_corpus(
            topics=4, queries_per_topic=8, n_passages=80, seed=3
        )
        train = set(data.train_query_ids)
        assert {t.query_id for t in data.triples} == train

    def test_margin_skew(self):
        # most pairs are easy (cross-topic, large margin); a minority are
        # hard (same-topic, small margin) -- the skew balancing undoes
        data = generate_synthetic_corpus(
            topics=6, queries_per_topic=10, n_passages=160, seed=4
        )
        margins = [
            data.scores.lookup(t.query_id, t.pos_id)
            - data.scores.lookup(t.query_id, t.neg_id)
            for t in data.triples
        ]
        easy = sum(1 for m in margins if m > 3.0)
        assert easy / len(margins) > 0.7
        assert min(margins) < 3.0

    def test_determinism(self):
        a = generate_synthetic_corpus(topics=3, queries_per_topic=4, n_passages=30, seed=9)
        b = generate_synthetic_corpus(topics=3, queries_per_topic=4, n_passages=30, seed=9)
        assert dict(a.queries.items()) == dict(b.queries.items())
        assert a.triples == b.triples
        assert a.train_query_ids == b.train_query_ids

    def test_validates_budget(self):
        with pytest.raises(ValueError, match="two passages per query"):
            generate_synthetic_corpus(topics=4, queries_per_topic=10, n_passages=50)


def tiny_config(**overrides) -> PipelineConfig:
    base = dict(
        synthetic=True,
        topics=6,
        queries_per_topic=10,
        n_passages=160,
        d_feat=512,
        d_emb=16,
        d_tok=8,
        embedding_table_size=2048,
        batch_size=8,
        baseline_steps=40,
        harness_max_steps=60,
        harness_eval_interval=30,
        harness_patience=2,
        validation_sample=6,
        validation_top_k=20,
        eval_k=20,
        seed=5,
    )
    base.update(overrides)
    return PipelineConfig(**base)


class TestHarness:
    def test_prepare_experiment_structure(self):
        setup = prepare_experiment(tiny_config())
        assert setup.clusters.k >= 2
        assert len(setup.validation.pools) == 6
        assert setup.test_query_ids
        # validation queries disjoint from test queries by construction
        assert not set(setup.validation.pools) & set(setup.test_query_ids)

    def test_ablation_grid_shape(self, tmp_path):
        rows = run_ablation(tiny_config(), str(tmp_path))
        labels = {(r["teacher"], r["strategy"]) for r in rows}
        assert ("none", "untrained") in labels
        assert len(labels) == 10  # untrained + 3x3 grid
        for row in rows:
            assert 0.0 <= row["ndcg_at_10"] <= 1.0
        content = (tmp_path / "ablation.tsv").read_text()
        assert content.startswith("teacher\tstrategy")
        assert len(content.strip().splitlines()) == 11

    def test_robustness_table(self, tmp_path):
        report = run_robustness(tiny_config(), str(tmp_path), n_seeds=2)
        assert report.instances == ["A", "B"]
        assert (tmp_path / "robustness.tsv").exists()
