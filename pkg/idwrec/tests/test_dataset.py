"""
Tests for idwrec/dataset.py

Covers interaction ingestion in every supported format, window building,
leave-one-out splitting, item statistics and the head/tail partition.
"""

import gzip
import json
import os
import shutil
import tempfile
import unittest

import numpy as np

from idwrec.dataset import (ExampleSet, InteractionLog, build_examples, chunk_sequence,
                            cluster_groups, compute_item_stats, head_tail_partition,
                            ingest_amazon_json, ingest_movielens, ingest_tsv, item_distribution,
                            leave_one_out, load_interactions, write_splits)
from idwrec.errors import EmptyInputError, ParseError


def make_log(sequences, num_items=None):
    sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
    if num_items is None:
        num_items = int(max(int(s.max()) for s in sequences)) + 1
    return InteractionLog(sequences=sequences, num_items=num_items)


def labels_only(labels, num_items, max_len=30):
    """Train split holding just the given labels (contexts of one item)."""
    labels = np.asarray(labels, dtype=np.int64)
    contexts = np.full((len(labels), max_len), num_items, dtype=np.int64)
    contexts[:, 0] = 0
    return ExampleSet(contexts=contexts, valid_lens=np.ones(len(labels), dtype=np.int64),
                      labels=labels, owners=np.arange(len(labels)), pad_id=num_items)


class TestIngestion(unittest.TestCase):
    """Unit tests for the interaction loaders."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write(self, name, text):
        path = os.path.join(self.temp_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_rows_sorted_by_position(self):
        """Out-of-order rows for one user come back in position order."""
        path = self._write("a.tsv", "u1\t30\t2\nu1\t10\t0\nu1\t20\t1\n")
        log = ingest_tsv(path)
        self.assertEqual(log.num_users, 1)
        self.assertEqual([log.item_ids[i] for i in log.sequences[0]], ["10", "20", "30"])

    def test_interleaved_users_partitioned(self):
        """Interleaved rows of two users form two separate sequences."""
        path = self._write("b.tsv", "user\titem\tposition\n1\t5\t0\n2\t6\t0\n1\t7\t1\n2\t8\t1\n")
        log = ingest_tsv(path)
        self.assertEqual(log.user_ids, ["1", "2"])
        self.assertEqual([log.item_ids[i] for i in log.sequences[0]], ["5", "7"])
        self.assertEqual([log.item_ids[i] for i in log.sequences[1]], ["6", "8"])

    def test_non_integer_item_names_line(self):
        """A non-integer item id raises a parse error naming its line."""
        path = self._write("c.tsv", "1\t5\t0\n1\tabc\t1\n")
        with self.assertRaises(ParseError) as ctx:
            ingest_tsv(path)
        self.assertEqual(ctx.exception.line_number, 2)

    def test_empty_file_rejected(self):
        """A file with no interactions raises EmptyInputError."""
        path = self._write("d.tsv", "")
        with self.assertRaises(EmptyInputError):
            ingest_tsv(path)

    def test_id_maps_written(self):
        """Raw-to-dense maps are persisted when a map directory is given."""
        path = self._write("e.tsv", "7\t100\t0\n3\t200\t0\n")
        map_dir = os.path.join(self.temp_dir, "maps")
        ingest_tsv(path, map_dir=map_dir)
        with open(os.path.join(map_dir, "users_map.tsv"), encoding="utf-8") as f:
            self.assertEqual(f.read().splitlines(), ["3\t0", "7\t1"])
        self.assertTrue(os.path.exists(os.path.join(map_dir, "items_map.tsv")))

    def test_movielens_format(self):
        """ratings.dat rows are ordered by timestamp."""
        path = self._write("ratings.dat", "1::1193::5::978300760\n1::661::3::978300000\n2::914::3::978301968\n")
        log = ingest_movielens(path)
        self.assertEqual(log.num_users, 2)
        self.assertEqual([log.item_ids[i] for i in log.sequences[0]], ["661", "1193"])

    def test_amazon_json_gzip(self):
        """Gzip-compressed review lines load like plain ones."""
        path = os.path.join(self.temp_dir, "reviews.json.gz")
        rows = [{"reviewerID": "A", "asin": "B01", "unixReviewTime": 20},
                {"reviewerID": "A", "asin": "B02", "unixReviewTime": 10}]
        with gzip.open(path, "wt", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
        log = ingest_amazon_json(path)
        self.assertEqual([log.item_ids[i] for i in log.sequences[0]], ["B02", "B01"])

    def test_unknown_format_rejected(self):
        """load_interactions() refuses unknown formats."""
        with self.assertRaises(ValueError):
            load_interactions("whatever", fmt="parquet")


class TestBuildExamples(unittest.TestCase):
    """Unit tests for chunk_sequence() and build_examples()."""

    def test_short_sequence_padded(self):
        """A length-5 sequence gives a 4-item context padded to 30."""
        examples = build_examples(make_log([[0, 1, 2, 3, 4]], num_items=5))
        self.assertEqual(len(examples), 1)
        ex = examples.example(0)
        self.assertEqual(ex.valid_len, 4)
        self.assertEqual(ex.label, 4)
        self.assertEqual(ex.context[:4], (0, 1, 2, 3))
        self.assertTrue(all(i == 5 for i in ex.context[4:]))
        self.assertEqual(len(ex.context), 30)

    def test_long_sequence_chunked(self):
        """A length-65 sequence splits into windows of 30, 30 and 5."""
        chunks = chunk_sequence(np.arange(65), 30)
        self.assertEqual([len(c) for c in chunks], [30, 30, 5])
        examples = build_examples(make_log([np.arange(65) % 40], num_items=40))
        self.assertEqual(len(examples), 3)
        self.assertTrue(np.all(examples.owners == 0))

    def test_short_user_dropped(self):
        """Users with fewer than three interactions are dropped."""
        examples = build_examples(make_log([[0, 1], [0, 1, 2]], num_items=3))
        self.assertEqual(len(examples), 1)
        self.assertEqual(int(examples.owners[0]), 1)

    def test_short_trailing_chunk_dropped(self):
        """A trailing chunk of two items is dropped."""
        examples = build_examples(make_log([np.arange(32) % 10], num_items=10))
        self.assertEqual(len(examples), 1)


class TestLeaveOneOut(unittest.TestCase):
    """Unit tests for leave_one_out()."""

    def test_four_item_window(self):
        """[a, b, c, d] tests on d, validates on c and trains on b."""
        splits = leave_one_out(build_examples(make_log([[10, 11, 12, 13]], num_items=14)))
        test, val, train = splits.test.example(0), splits.validation.example(0), splits.train.example(0)
        self.assertEqual((test.label, test.context[:test.valid_len]), (13, (10, 11, 12)))
        self.assertEqual((val.label, val.context[:val.valid_len]), (12, (10, 11)))
        self.assertEqual((train.label, train.context[:train.valid_len]), (11, (10,)))
        self.assertEqual(len(splits.train), 1)

    def test_one_test_example_per_user(self):
        """100 users of length 4 give exactly 100 test examples."""
        rng = np.random.default_rng(0)
        log = make_log([rng.integers(0, 20, size=4) for _ in range(100)], num_items=20)
        splits = leave_one_out(build_examples(log))
        self.assertEqual(len(splits.test), 100)
        self.assertEqual(len(splits.validation), 100)

    def test_round_trip_and_no_leakage(self):
        """Train contexts plus the two held-out labels rebuild each window."""
        rng = np.random.default_rng(1)
        seqs = [rng.permutation(50)[: int(rng.integers(3, 30))] for _ in range(20)]
        splits = leave_one_out(build_examples(make_log(seqs, num_items=50)))
        for row in range(len(splits.test)):
            owner = int(splits.test.owners[row])
            test = splits.test.example(row)
            rebuilt = list(test.context[:test.valid_len]) + [test.label]
            self.assertEqual(rebuilt, seqs[owner].tolist())
            val_row = np.flatnonzero(splits.validation.owners == owner)[0]
            self.assertEqual(int(splits.validation.labels[val_row]), int(seqs[owner][-2]))
            train_rows = np.flatnonzero(splits.train.owners == owner)
            for r in train_rows:
                ctx = splits.train.contexts[r, : splits.train.valid_lens[r]]
                self.assertNotIn(int(seqs[owner][-1]), ctx.tolist())
                self.assertNotIn(int(seqs[owner][-2]), ctx.tolist())
            self.assertEqual(len(train_rows), len(seqs[owner]) - 3)

    def test_histories_cover_all_windows(self):
        """The per-user history holds every item of every window."""
        splits = leave_one_out(build_examples(make_log([np.arange(35) % 12], num_items=12)))
        np.testing.assert_array_equal(splits.user_histories[0], np.arange(12))

    def test_write_splits(self):
        """write_splits() emits one TSV per split."""
        temp_dir = tempfile.mkdtemp()
        try:
            splits = leave_one_out(build_examples(make_log([[0, 1, 2, 3]], num_items=4)))
            paths = write_splits(splits, temp_dir)
            self.assertEqual(len(paths), 3)
            with open(paths[2], encoding="utf-8") as f:
                self.assertEqual(f.read(), "0\t3\t0 1 2\n")
        finally:
            shutil.rmtree(temp_dir, ignore_errors=True)


class TestItemStats(unittest.TestCase):
    """Unit tests for compute_item_stats() and head_tail_partition()."""

    def test_counts_and_probabilities(self):
        """Labels [1, 1, 2] give n = [0, 2, 1] and p = [0, 2/3, 1/3]."""
        stats = compute_item_stats(labels_only([1, 1, 2], 3), 3)
        np.testing.assert_array_equal(stats.counts, [0, 2, 1])
        np.testing.assert_allclose(stats.probabilities, [0, 2 / 3, 1 / 3])
        self.assertAlmostEqual(stats.probabilities.sum(), 1.0)

    def test_uniform_labels(self):
        """Uniform labels over 10 items give p = 0.1 each."""
        stats = compute_item_stats(labels_only(np.repeat(np.arange(10), 3), 10), 10)
        np.testing.assert_allclose(stats.probabilities, 0.1)

    def test_empty_train_rejected(self):
        """An empty train split raises EmptyInputError."""
        with self.assertRaises(EmptyInputError):
            compute_item_stats(ExampleSet.empty(30, 5), 5)

    def test_distinct_counts_head(self):
        """Ten items with distinct counts put the top two in the head."""
        labels = np.repeat(np.arange(10), np.arange(1, 11))
        stats = compute_item_stats(labels_only(labels, 10), 10)
        self.assertEqual(stats.head_set, frozenset({8, 9}))
        self.assertEqual(len(stats.tail_set), 8)

    def test_ties_favour_low_ids(self):
        """Equal counts put the lowest 20% of ids in the head."""
        stats = compute_item_stats(labels_only(np.arange(10), 10), 10)
        self.assertEqual(stats.head_set, frozenset({0, 1}))

    def test_five_items_one_head(self):
        """Five seen items give ceil(1) = 1 head item."""
        stats = compute_item_stats(labels_only([0, 1, 1, 2, 3, 4], 5), 5)
        head, tail = head_tail_partition(stats)
        self.assertEqual(head, frozenset({1}))
        self.assertEqual(tail, frozenset({0, 2, 3, 4}))

    def test_item_distribution_sorted(self):
        """item_distribution() lists the most frequent items first."""
        stats = compute_item_stats(labels_only([2, 2, 2, 0], 3), 3)
        self.assertEqual([i for i, _ in item_distribution(stats)], [2, 0])

    def test_cluster_groups(self):
        """Cluster groups collect every item of the named clusters."""
        groups = cluster_groups(np.array([0, 0, 1, 1, 2, 2]), [1], [0, 2])
        self.assertEqual(groups["head"], frozenset({2, 3}))
        self.assertEqual(groups["tail"], frozenset({0, 1, 4, 5}))


if __name__ == "__main__":
    unittest.main()
