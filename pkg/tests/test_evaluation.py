import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

import oracles
from tagssl.evaluation import (
    EvalReport,
    ProbeConfig,
    ari,
    cluster_accuracy,
    contingency_table,
    eval_clustering,
    eval_fewshot_clf,
    eval_full_clf,
    eval_link_mrr,
    kmeans_pp,
    nmi,
    reciprocal_ranks,
)
from tagssl.graph import LinkEvalSet, LinkQuery, generate_synthetic_tag


def one_hot_embeddings(graph, dim_extra=0):
    emb = np.zeros((graph.num_nodes, graph.num_classes + dim_extra), dtype=np.float32)
    emb[np.arange(graph.num_nodes), graph.labels] = 1.0
    return emb


class TestKMeans:
    def test_square_corners(self):
        pts = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
        res = kmeans_pp(pts, 4, np.random.default_rng(0))
        assert sorted(res.labels.tolist()) == [0, 1, 2, 3]
        assert res.inertia == 0.0

    def test_two_blobs(self):
        pts = np.array([[0, 0], [0.1, 0], [10, 10], [10, 10.1]])
        for seed in range(5):
            lab = kmeans_pp(pts, 2, np.random.default_rng(seed)).labels
            assert lab[0] == lab[1] and lab[2] == lab[3] and lab[0] != lab[2]

    @pytest.mark.parametrize("seed", range(10))
    def test_lloyd_never_increases_inertia(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(30, 2))
        res = kmeans_pp(pts, 3, rng)
        assert res.inertia <= res.seeding_inertia + 1e-12
        brute = sum(((pts[res.labels == c] - res.centers[c]) ** 2).sum() for c in range(3))
        assert res.inertia == pytest.approx(brute)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            kmeans_pp(np.zeros((2, 2)), 3, np.random.default_rng(0))

    def test_duplicate_points_do_not_crash(self):
        res = kmeans_pp(np.zeros((6, 2)), 3, np.random.default_rng(0))
        assert len(res.labels) == 6


class TestMetrics:
    def test_perfect(self):
        t = contingency_table(np.array([1, 1, 0, 0, 2]), np.array([0, 0, 1, 1, 2]))
        assert cluster_accuracy(t) == nmi(t) == ari(t) == 1.0

    def test_hand_counted(self):
        labels, clusters = [0, 0, 1, 1], [0, 0, 1, 0]
        t = contingency_table(np.array(clusters), np.array(labels))
        assert t.tolist() == [[2, 1], [0, 1]]
        assert cluster_accuracy(t) == 0.75
        # pairs: index = C(2,2) = 1; rows C(3,2)+C(1,2) = 3; cols 1+1 = 2
        # expected = 3*2/6 = 1, max = 2.5 -> ARI = 0
        assert ari(t) == pytest.approx(0.0, abs=1e-15)
        assert ari(t) == pytest.approx(oracles.pair_count_ari(clusters, labels), abs=1e-12)
        h_c = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        h_l = math.log(2)
        mi = 0.5 * math.log(0.5 / (0.75 * 0.5)) + 0.25 * math.log(0.25 / (0.75 * 0.5)) + 0.25 * math.log(0.25 / (0.25 * 0.5))
        assert nmi(t) == pytest.approx(mi / math.sqrt(h_c * h_l), abs=1e-12)

    @pytest.mark.parametrize("seed", range(50))
    def test_random_tables_match_definitions(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(2, 11, size=2))
        table = rng.integers(0, 6, size=shape)
        table[rng.integers(shape[0]), :] += 1  # at least one item and two classes
        table[:, 0] += 1
        table[:, 1] += 1
        clusters, labels = oracles.items_from_table(table)
        t = contingency_table(np.array(clusters), np.array(labels))
        assert ari(t) == pytest.approx(oracles.pair_count_ari(clusters, labels), abs=1e-9)
        assert nmi(t) == pytest.approx(oracles.entropy_nmi(clusters, labels), abs=1e-9)
        assert cluster_accuracy(t) == pytest.approx(oracles.majority_acc(clusters, labels), abs=1e-12)
        # library cross-check on the same items
        assert ari(t) == pytest.approx(skm.adjusted_rand_score(labels, clusters), abs=1e-9)
        assert nmi(t) == pytest.approx(
            skm.normalized_mutual_info_score(labels, clusters, average_method="geometric"), abs=1e-9
        )

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=4, max_size=40), st.integers(0, 1000))
    def test_ranges_and_relabel_invariance(self, clusters, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, size=len(clusters))
        labels[:2] = [0, 1]
        clusters = np.array(clusters)
        t = contingency_table(clusters, labels)
        relabel_c = rng.permutation(10)[clusters]
        relabel_l = rng.permutation(10)[labels]
        t2 = contingency_table(relabel_c, relabel_l)
        assert 0 <= cluster_accuracy(t) <= 1
        assert -1 <= ari(t) <= 1
        assert 0 <= nmi(t) <= 1 + 1e-12
        assert ari(t2) == pytest.approx(ari(t), abs=1e-12)
        assert nmi(t2) == pytest.approx(nmi(t), abs=1e-12)

    def test_random_assignment_ari_near_zero(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, size=2000)
        null = [ari(contingency_table(rng.integers(0, 4, size=2000), labels)) for _ in range(200)]
        sd = np.std(null)
        fresh = ari(contingency_table(rng.integers(0, 4, size=2000), labels))
        assert abs(np.mean(null)) <= 3 * sd / math.sqrt(200)
        assert abs(fresh) <= 3 * sd

    def test_single_class_nmi_is_an_error(self):
        with pytest.raises(ValueError):
            nmi(contingency_table(np.array([0, 1, 0]), np.array([0, 0, 0])))


class TestEvalClustering:
    def test_perfect_clusters(self):
        g = generate_synthetic_tag(seed=0)
        reports = eval_clustering(one_hot_embeddings(g), g, runs=10)
        for m in ("acc", "nmi", "ari"):
            assert reports[m].values == [1.0] * 10
            assert reports[m].repeats == 10

    def test_single_class(self):
        g = generate_synthetic_tag(num_classes=1, nodes_per_class=10, p_in=0.5, p_out=0.0)
        with pytest.raises(ValueError, match="single class"):
            eval_clustering(np.zeros((10, 2)), g)


class TestClassification:
    g = generate_synthetic_tag(num_classes=4, nodes_per_class=50, seed=0)

    def test_fewshot_separable(self):
        rep = eval_fewshot_clf(one_hot_embeddings(self.g), self.g, 2, ProbeConfig(), repeats=3)
        assert rep.values == [1.0, 1.0, 1.0]

    def test_fewshot_random_is_chance(self):
        g = generate_synthetic_tag(num_classes=4, nodes_per_class=250, p_in=0.01, p_out=0.001, seed=1)
        emb = np.random.default_rng(0).normal(size=(g.num_nodes, 16)).astype(np.float32)
        rep = eval_fewshot_clf(emb, g, 8, ProbeConfig(epochs=100), repeats=5)
        n_test = len(g.split_nodes("test"))
        sd = math.sqrt(0.25 * 0.75 / n_test)
        assert abs(rep.mean - 0.25) <= 3 * sd

    def test_fewshot_deterministic(self):
        emb = np.random.default_rng(1).normal(size=(self.g.num_nodes, 8)).astype(np.float32)
        a = eval_fewshot_clf(emb, self.g, 4, ProbeConfig(epochs=20), repeats=2, seed=3)
        b = eval_fewshot_clf(emb, self.g, 4, ProbeConfig(epochs=20), repeats=2, seed=3)
        assert a == b

    def test_fewshot_insufficient_class(self):
        with pytest.raises(ValueError):
            eval_fewshot_clf(one_hot_embeddings(self.g), self.g, 31, repeats=1)

    def test_full_separable(self):
        rep = eval_full_clf(one_hot_embeddings(self.g), self.g, repeats=2)
        assert rep.values == [1.0, 1.0]

    def test_untrained_probe_is_chance(self):
        g = generate_synthetic_tag(num_classes=4, nodes_per_class=250, p_in=0.01, p_out=0.001, seed=1)
        emb = np.random.default_rng(2).normal(size=(g.num_nodes, 16)).astype(np.float32)
        rep = eval_full_clf(emb, g, ProbeConfig(epochs=0), repeats=5)
        sd = math.sqrt(0.25 * 0.75 / len(g.split_nodes("test")))
        assert abs(rep.mean - 0.25) <= 3 * sd

    def test_graphsage_probe_uses_structure(self):
        # features are pure noise; only message passing over the homophilous graph helps
        g = generate_synthetic_tag(num_classes=4, nodes_per_class=50, p_in=0.3, p_out=0.005, seed=2)
        emb = one_hot_embeddings(g) + np.random.default_rng(0).normal(scale=2.0, size=(200, 4)).astype(np.float32)
        mlp = eval_full_clf(emb, g, ProbeConfig(epochs=200, learning_rate=1e-2), repeats=2)
        sage = eval_full_clf(emb, g, ProbeConfig(probe="graphsage", epochs=100), repeats=2)
        assert sage.mean > mlp.mean

    def test_mismatched_rows(self):
        with pytest.raises(ValueError, match="dataset/embedding mismatch"):
            eval_full_clf(np.zeros((3, 2)), self.g)

    def test_probe_defaults(self):
        assert ProbeConfig().learning_rate == 1e-4 and ProbeConfig().epochs == 300
        sage = ProbeConfig(probe="graphsage")
        assert sage.learning_rate == 1e-3 and sage.hidden_dim == 256 and sage.dropout == 0.5


class TestLinkMrr:
    def emb(self, pos_score, neg_scores):
        # source along x; candidates at the requested cosines
        vecs = [[1.0, 0.0], [pos_score, math.sqrt(1 - pos_score**2)]]
        vecs += [[s, math.sqrt(1 - s**2)] for s in neg_scores]
        eval_set = LinkEvalSet((LinkQuery(0, 1, np.arange(2, 2 + len(neg_scores))),))
        return np.array(vecs), eval_set

    def test_top_rank(self):
        emb, s = self.emb(1.0, [0.5, 0.2, -0.3])
        assert eval_link_mrr(emb, s).mean == 1.0

    def test_second_rank(self):
        emb, s = self.emb(0.6, [0.9, 0.2, -0.3])
        assert eval_link_mrr(emb, s).mean == 0.5

    def test_ties_rank_pessimistically(self):
        emb = np.ones((4, 3))
        s = LinkEvalSet((LinkQuery(0, 1, np.array([2, 3])),))
        assert reciprocal_ranks(emb, s).tolist() == [1 / 3]
        assert reciprocal_ranks(emb, s).tolist() == reciprocal_ranks(emb, s).tolist()

    def test_missing_row(self):
        s = LinkEvalSet((LinkQuery(0, 1, np.array([7])),))
        with pytest.raises(ValueError, match="missing embedding"):
            eval_link_mrr(np.ones((3, 2)), s)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(-1, 1), st.floats(0, 2))
    def test_monotone_in_positive_score(self, negs, pos, bump):
        lo = min(pos, 1.0)
        hi = min(pos + bump, 1.0)
        e1, s = self.emb(lo, negs)
        e2, _ = self.emb(hi, negs)
        assert eval_link_mrr(e2, s).mean >= eval_link_mrr(e1, s).mean
        assert 0 < eval_link_mrr(e1, s).mean <= 1

    def test_random_embeddings_match_uniform_rank_expectation(self):
        rng = np.random.default_rng(0)
        n_neg, n_q = 1000, 500
        emb = rng.normal(size=(n_q * (n_neg + 2), 16))
        queries = []
        for q in range(n_q):
            base = q * (n_neg + 2)
            queries.append(LinkQuery(base, base + 1, np.arange(base + 2, base + 2 + n_neg)))
        mrr = eval_link_mrr(emb, LinkEvalSet(tuple(queries))).mean
        ranks = np.arange(1, n_neg + 2)
        expected = np.mean(1 / ranks)
        sd = math.sqrt((np.mean(1 / ranks**2) - expected**2) / n_q)
        assert expected == pytest.approx(0.00747, abs=1e-5)
        assert abs(mrr - expected) <= 3 * sd


def test_report_files(tmp_path):
    rep = EvalReport("cluster", "acc", [0.5, 0.7, 0.9], {"runs": 3})
    assert rep.mean == pytest.approx(0.7)
    assert rep.std == pytest.approx(np.std([0.5, 0.7, 0.9]))
    table, summary = rep.write(tmp_path)
    rows = table.read_text().splitlines()
    assert rows[0] == "task\tmetric\trepeat\tvalue" and len(rows) == 4
    values = [float(r.split("\t")[3]) for r in rows[1:]]
    data = json.loads(summary.read_text())
    assert data["mean"] == pytest.approx(np.mean(values)) and data["std"] == pytest.approx(np.std(values))
