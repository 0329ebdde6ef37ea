"""
Tests for idwrec/weighting.py

Covers the per-item weighting rules built for each loss strategy.
"""

import unittest

import numpy as np

from idwrec.dataset import ItemStats
from idwrec.errors import InvalidConfigError
from idwrec.weighting import (STRATEGIES, frequency_weights, qmargin_margins, strategy_weights,
                              validate_weight_table)


def stats_from_counts(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return ItemStats(counts=counts, probabilities=counts / counts.sum())


class TestFrequencyWeights(unittest.TestCase):
    """Unit tests for frequency_weights()."""

    def test_balanced_counts_are_fixed_point(self):
        """Equal counts give weight 1 for every item."""
        np.testing.assert_allclose(frequency_weights(np.array([0.5, 0.5])), [1.0, 1.0])

    def test_inverse_frequency_ratio(self):
        """p = [0.9, 0.1] gives a 1:9 weight ratio with mean 1."""
        w = frequency_weights(np.array([0.9, 0.1]))
        self.assertAlmostEqual(w[1] / w[0], 9.0)
        self.assertAlmostEqual(w.mean(), 1.0)

    def test_unseen_items_excluded(self):
        """Items with p = 0 get weight 0 and a warning."""
        with self.assertLogs("idwrec.weighting", level="WARNING"):
            w = frequency_weights(np.array([0.5, 0.0, 0.5]))
        np.testing.assert_allclose(w, [1.0, 0.0, 1.0])


class TestQmargin(unittest.TestCase):
    """Unit tests for qmargin_margins()."""

    def test_largest_margin_is_max(self):
        """The rarest item gets exactly the maximum margin."""
        m = qmargin_margins(np.array([0.7, 0.2, 0.1]), max_margin=0.5)
        self.assertAlmostEqual(m.max(), 0.5)
        self.assertAlmostEqual(m[2], 0.5)

    def test_nonincreasing_in_probability(self):
        """Margins never grow with p(y)."""
        p = np.random.default_rng(0).dirichlet(np.ones(30))
        m = qmargin_margins(p)
        order = np.argsort(p)
        self.assertTrue(np.all(np.diff(m[order]) <= 1e-15))

    def test_quarter_power_ratio(self):
        """Margins follow p^(-1/4): a 16x rarer item has twice the margin."""
        m = qmargin_margins(np.array([16 / 17, 1 / 17]))
        self.assertAlmostEqual(m[1] / m[0], 2.0)


class TestStrategyWeights(unittest.TestCase):
    """Unit tests for strategy_weights() and validate_weight_table()."""

    def setUp(self):
        self.stats = stats_from_counts([6, 3, 1, 0])

    def test_every_strategy_builds(self):
        """Each named strategy produces a rule with one weight per item."""
        table = np.array([0.4, 0.3, 0.3, 0.0])
        for strategy in STRATEGIES:
            rule = strategy_weights(strategy, self.stats, external=table)
            self.assertEqual(rule.strategy, strategy)
            self.assertEqual(rule.item_weights.shape, (4,))

    def test_uniform_is_all_ones(self):
        """Uniform weighting leaves every example at weight 1."""
        rule = strategy_weights("uniform", self.stats)
        np.testing.assert_array_equal(rule.item_weights, np.ones(4))
        self.assertIsNone(rule.focal_gamma)
        self.assertIsNone(rule.item_margins)

    def test_switches(self):
        """focal, qmargin and item-norm strategies set their loss switches."""
        self.assertEqual(strategy_weights("focal", self.stats, focal_gamma=1.5).focal_gamma, 1.5)
        self.assertIsNotNone(strategy_weights("qmargin", self.stats).item_margins)
        norm = strategy_weights("item_norm", self.stats)
        self.assertTrue(norm.normalize_items_train and norm.normalize_items_eval)
        posthoc = strategy_weights("item_norm_posthoc", self.stats)
        self.assertFalse(posthoc.normalize_items_train)
        self.assertTrue(posthoc.normalize_items_eval)

    def test_external_weights_rescaled(self):
        """Simplex weights are scaled to mean 1 over the items carrying weight."""
        rule = strategy_weights("external_weights", self.stats, external=np.array([0.5, 0.25, 0.25, 0.0]))
        np.testing.assert_allclose(rule.item_weights, [1.5, 0.75, 0.75, 0.0])

    def test_external_weights_must_sum_to_one(self):
        """A table off the simplex is rejected."""
        with self.assertRaises(InvalidConfigError):
            strategy_weights("external_weights", self.stats, external=np.array([0.5, 0.5, 0.5, 0.0]))

    def test_external_weights_required(self):
        """external_weights without a table is rejected."""
        with self.assertRaises(InvalidConfigError):
            strategy_weights("external_weights", self.stats)

    def test_negative_weights_rejected(self):
        """Negative entries fail validation."""
        with self.assertRaises(InvalidConfigError):
            validate_weight_table(np.array([1.2, -0.2]))

    def test_unknown_strategy(self):
        """Unknown names raise InvalidConfigError."""
        with self.assertRaises(InvalidConfigError):
            strategy_weights("median", self.stats)


if __name__ == "__main__":
    unittest.main()
