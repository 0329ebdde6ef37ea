"""
Tests for idwrec/evaluation.py

Covers ranking with sampled negatives, HR/NDCG, per-group aggregation and
the mean silhouette score.
"""

import itertools
import math
import unittest

import numpy as np
import torch
from pydantic import ValidationError

from idwrec.dataset import ExampleSet
from idwrec.errors import ProtocolError, UndefinedMetricError
from idwrec.evaluation import (OVERALL, EvalProtocol, MetricsReport, evaluate, hr_at_k,
                               mean_silhouette, ndcg_at_k, negatives_for_examples, rank_of_label,
                               ranks_from_scores, sample_negatives)
from idwrec.towers import TowerConfig, build_model


def brute_force_silhouette(points, clusters):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    scores = []
    for p in range(n):
        dist = {}
        for q in range(n):
            if q != p:
                dist.setdefault(clusters[q], []).append(float(np.linalg.norm(points[p] - points[q])))
        own = dist.get(clusters[p], [])
        if not own:
            scores.append(0.0)
            continue
        a = np.mean(own)
        b = min(np.mean(v) for c, v in dist.items() if c != clusters[p])
        scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return float(np.mean(scores))


def make_examples(num_users, num_items, max_len=5, seed=0):
    rng = np.random.default_rng(seed)
    contexts = np.full((num_users, max_len), num_items, dtype=np.int64)
    valid = rng.integers(1, max_len + 1, size=num_users)
    for row, n in enumerate(valid):
        contexts[row, :n] = rng.choice(num_items, size=n, replace=False)
    labels = np.array([rng.choice(np.setdiff1d(np.arange(num_items), contexts[r, :valid[r]]))
                       for r in range(num_users)], dtype=np.int64)
    examples = ExampleSet(contexts=contexts, valid_lens=valid, labels=labels,
                          owners=np.arange(num_users), pad_id=num_items)
    histories = {u: np.unique(np.append(contexts[u, :valid[u]], labels[u])) for u in range(num_users)}
    return examples, histories


class TestMetrics(unittest.TestCase):
    """Unit tests for hr_at_k(), ndcg_at_k() and ranks_from_scores()."""

    def test_rank_one(self):
        """Rank 1 gives HR = NDCG = 1."""
        self.assertEqual(hr_at_k(1, 20), 1)
        self.assertEqual(ndcg_at_k(1, 20), 1.0)

    def test_rank_three(self):
        """Rank 3 gives NDCG 1/log2(4) = 0.5."""
        self.assertAlmostEqual(ndcg_at_k(3, 20), 0.5)

    def test_outside_cutoff(self):
        """Rank 21 at K = 20 gives zeros."""
        self.assertEqual(hr_at_k(21, 20), 0)
        self.assertEqual(ndcg_at_k(21, 20), 0.0)

    def test_ndcg_never_exceeds_hr(self):
        """NDCG <= HR for every rank and cutoff."""
        ranks = np.arange(1, 101)
        for k in (1, 5, 20, 100):
            self.assertTrue(np.all(ndcg_at_k(ranks, k) <= hr_at_k(ranks, k)))

    def test_label_strictly_highest(self):
        """The top-scoring label ranks first."""
        self.assertEqual(ranks_from_scores(np.array([[3.0, 1.0, 2.0]]))[0], 1)

    def test_tie_is_pessimistic(self):
        """A tie with one negative puts the label second."""
        self.assertEqual(ranks_from_scores(np.array([[2.0, 2.0, 1.0]]))[0], 2)

    def test_matches_sort_oracle(self):
        """All permutations of up to 8 distinct scores agree with sorting."""
        for n in range(2, 9):
            scores = np.arange(n, dtype=np.float64)
            rows = np.array(list(itertools.permutations(scores)))
            oracle = [1 + sorted(row, reverse=True).index(row[0]) for row in rows]
            np.testing.assert_array_equal(ranks_from_scores(rows), oracle)

    def test_increasing_transform_invariant(self):
        """exp() of the scores leaves every rank unchanged."""
        scores = np.random.default_rng(0).normal(size=(50, 10))
        np.testing.assert_array_equal(ranks_from_scores(scores), ranks_from_scores(np.exp(scores)))


class TestNegatives(unittest.TestCase):
    """Unit tests for sample_negatives() and negatives_for_examples()."""

    def test_exact_pool(self):
        """A history covering all but 99 items returns exactly those 99."""
        history = np.arange(50)
        negatives = sample_negatives(history, 149, 99, np.random.default_rng(0))
        np.testing.assert_array_equal(np.sort(negatives), np.arange(50, 149))

    def test_disjoint_from_history_and_label(self):
        """Negatives avoid the history and the label, without repeats."""
        rng = np.random.default_rng(1)
        for _ in range(200):
            history = rng.choice(300, size=40, replace=False)
            label = int(history[0])
            negatives = sample_negatives(history, 300, 99, rng, label=label)
            self.assertEqual(len(set(negatives.tolist())), 99)
            self.assertFalse(set(negatives.tolist()) & set(history.tolist()))
            self.assertNotIn(label, negatives)

    def test_seeded_determinism(self):
        """The same seed draws the same set."""
        a = sample_negatives(np.arange(10), 200, 99, np.random.default_rng(5))
        b = sample_negatives(np.arange(10), 200, 99, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_pool_too_small(self):
        """Too few eligible items raise ProtocolError."""
        with self.assertRaises(ProtocolError):
            sample_negatives(np.arange(60), 100, 99, np.random.default_rng(0), owner=3)

    def test_fixed_per_user_and_seed(self):
        """Negatives depend only on (user, protocol seed)."""
        examples, histories = make_examples(10, 40)
        protocol = EvalProtocol(k_values=[5], num_negatives=20, seeds=[0])
        a = negatives_for_examples(examples, histories, 40, protocol, seed=0)
        b = negatives_for_examples(examples.subset(np.arange(9, -1, -1)), histories, 40, protocol, seed=0)
        np.testing.assert_array_equal(a, b[::-1])
        c = negatives_for_examples(examples, histories, 40, protocol, seed=1)
        self.assertFalse(np.array_equal(a, c))


class TestEvaluate(unittest.TestCase):
    """Unit tests for evaluate() and rank_of_label()."""

    @classmethod
    def setUpClass(cls):
        cls.model = build_model(200, TowerConfig(embed_dim=8, num_reps=2, encoder_layers=1,
                                                 attention_heads=2, max_len=5, rng_seed=0,
                                                 dtype="float64"))
        cls.examples, cls.histories = make_examples(3000, 200)

    def test_protocol_rejects_large_k(self):
        """A cutoff beyond the candidate count fails validation."""
        with self.assertRaises(ValidationError):
            EvalProtocol(k_values=[50], num_negatives=29)

    def test_rank_of_label_matches_batch(self):
        """The single-example ranking matches the batched ranks."""
        protocol = EvalProtocol(k_values=[5], num_negatives=99, seeds=[0])
        _, ranks = evaluate(self.model, self.examples, self.histories, 200, protocol, return_ranks=True)
        negatives = negatives_for_examples(self.examples, self.histories, 200, protocol, 0)
        with torch.no_grad():
            z = self.model.user_representations(torch.from_numpy(self.examples.contexts[:5]),
                                                torch.from_numpy(self.examples.valid_lens[:5]))
        for row in range(5):
            self.assertEqual(rank_of_label(self.model, z[row], int(self.examples.labels[row]), negatives[row]),
                             int(ranks[row]))

    def test_untrained_model_near_chance(self):
        """An untrained model hits HR@20 of about 0.2 with 99 negatives."""
        protocol = EvalProtocol(k_values=[20], num_negatives=99, seeds=[0, 1, 2])
        report = evaluate(self.model, self.examples, self.histories, 200, protocol)
        self.assertAlmostEqual(report.get(OVERALL, 20).hr, 0.2, delta=0.02)

    def test_groups_and_weighted_mean(self):
        """Overall is the count-weighted mean of head and tail groups."""
        protocol = EvalProtocol(k_values=[5, 20], num_negatives=99, seeds=[0])
        head = frozenset(range(40))
        tail = frozenset(range(40, 200))
        report = evaluate(self.model, self.examples, self.histories, 200, protocol,
                          groups={"head": head, "tail": tail})
        for k in (5, 20):
            h, t, o = report.get("head", k), report.get("tail", k), report.get(OVERALL, k)
            self.assertEqual(h.num_examples + t.num_examples, o.num_examples)
            weighted = (h.num_examples * h.hr + t.num_examples * t.hr) / o.num_examples
            self.assertAlmostEqual(o.hr, weighted, places=12)
            self.assertLessEqual(o.ndcg, o.hr)

    def test_empty_group_absent(self):
        """A group with no test labels is reported as absent, not zero."""
        protocol = EvalProtocol(k_values=[5], num_negatives=99, seeds=[0])
        report = evaluate(self.model, self.examples, self.histories, 200, protocol,
                          groups={"head": frozenset(range(200)), "tail": frozenset()})
        self.assertEqual(report.absent, ["tail"])
        self.assertIsNone(report.get("tail", 5))

    def test_same_protocol_is_reproducible(self):
        """Evaluating twice with the same protocol gives identical reports."""
        protocol = EvalProtocol(k_values=[5, 20], num_negatives=99, seeds=[0, 1])
        a = evaluate(self.model, self.examples, self.histories, 200, protocol)
        b = evaluate(self.model, self.examples, self.histories, 200, protocol)
        self.assertEqual(a.model_dump(), b.model_dump())

    def test_report_flattening(self):
        """flat() names entries split/metric@k and adds the MS score."""
        protocol = EvalProtocol(k_values=[5], num_negatives=99, seeds=[0])
        clusters = np.arange(200) % 4
        report = evaluate(self.model, self.examples, self.histories, 200, protocol, item_clusters=clusters)
        flat = report.flat()
        self.assertIn("overall/hr@5", flat)
        self.assertIn("overall/ndcg@5", flat)
        self.assertIn("ms", flat)
        self.assertEqual(MetricsReport(**report.model_dump()).flat(), flat)


class TestSilhouette(unittest.TestCase):
    """Unit tests for mean_silhouette()."""

    def test_four_point_example(self):
        """Clusters {0, 1} and {10, 11} on a line give about 0.8998."""
        ms = mean_silhouette(np.array([[0.0], [1.0], [10.0], [11.0]]), np.array([0, 0, 1, 1]))
        expected = np.mean([(10.5 - 1) / 10.5, (9.5 - 1) / 9.5, (9.5 - 1) / 9.5, (10.5 - 1) / 10.5])
        self.assertAlmostEqual(ms, expected, places=12)
        self.assertAlmostEqual(ms, 0.8998, delta=1e-4)

    def test_perfect_separation(self):
        """Coincident points per cluster, far apart, score 1."""
        points = np.array([[0.0, 0.0]] * 3 + [[5.0, 5.0]] * 3)
        self.assertAlmostEqual(mean_silhouette(points, np.array([0, 0, 0, 1, 1, 1])), 1.0)

    def test_all_coincident(self):
        """All points on one spot score 0."""
        self.assertAlmostEqual(mean_silhouette(np.zeros((6, 2)), np.array([0, 0, 0, 1, 1, 1])), 0.0)

    def test_single_cluster_rejected(self):
        """One cluster leaves the score undefined."""
        with self.assertRaises(UndefinedMetricError):
            mean_silhouette(np.zeros((3, 2)), np.zeros(3, dtype=int))

    def test_matches_brute_force(self):
        """Random data with a singleton cluster matches the definition within 1e-9."""
        rng = np.random.default_rng(3)
        for _ in range(10):
            points = rng.normal(size=(30, 3))
            clusters = rng.integers(0, 4, size=30)
            clusters[0] = 9
            self.assertAlmostEqual(mean_silhouette(points, clusters),
                                   brute_force_silhouette(points, clusters), delta=1e-9)

    def test_rigid_and_scale_invariance(self):
        """Rotation, translation and uniform scaling leave the score unchanged."""
        rng = np.random.default_rng(4)
        points = rng.normal(size=(25, 2))
        clusters = rng.integers(0, 3, size=25)
        angle = 0.7
        rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        moved = 3.0 * points @ rotation.T + np.array([5.0, -2.0])
        self.assertAlmostEqual(mean_silhouette(points, clusters), mean_silhouette(moved, clusters), places=9)


if __name__ == "__main__":
    unittest.main()
