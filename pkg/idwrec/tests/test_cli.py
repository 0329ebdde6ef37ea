"""
Tests for idwrec/cli.py

Covers the subcommands end to end on tiny synthetic runs: generate, train,
idw, evaluate, report and sweep, plus the exit codes.
"""

import csv
import glob
import json
import os
import shutil
import tempfile
import unittest

from idwrec.cli import EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, main

TINY = [
    "data.synthetic.num_users=60",
    "towers.embed_dim=8",
    "towers.num_reps=2",
    "towers.encoder_layers=1",
    "train.max_epochs=1",
    "idw.max_iterations=1",
    "idw.wake.max_epochs=1",
    "eval.seeds=[0]",
]


def tiny_flags(prefix=""):
    flags = []
    for item in TINY:
        flags += ["--set", prefix + item]
    return flags


class TestCommands(unittest.TestCase):
    """End-to-end tests for main()."""

    def setUp(self):
        self.root = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.root, ignore_errors=True)

    def _run(self, *args, prefix=""):
        return main(list(args) + ["--preset", "synthetic", "--seeds", "0", "--output-root", self.root]
                    + tiny_flags(prefix))

    def _only_run_dir(self, pattern):
        matches = glob.glob(os.path.join(self.root, pattern))
        self.assertEqual(len(matches), 1, matches)
        return matches[0]

    def _metrics(self, run_dir):
        with open(os.path.join(run_dir, "metrics.json"), "r", encoding="utf-8") as f:
            return json.load(f)

    def test_generate_writes_dataset(self):
        """generate writes interactions, ground truth and its config per seed."""
        self.assertEqual(self._run("generate"), EXIT_OK)
        run_dir = self._only_run_dir("*-generate-*")
        for name in ("interactions.tsv", "ground_truth.tsv", "synth_config.json"):
            self.assertTrue(os.path.exists(os.path.join(run_dir, "seed_0", name)), name)
        for name in ("config.json", "metrics.json", "run_info.json", "run.log"):
            self.assertTrue(os.path.exists(os.path.join(run_dir, name)), name)
        self.assertEqual(len(self._metrics(run_dir)["seeds"]["0"]["interest_weights"]), 5)

    def test_generated_files_train_as_tsv(self):
        """A generated dataset trains through the TSV reader with cluster groups."""
        self.assertEqual(self._run("generate"), EXIT_OK)
        seed_dir = os.path.join(self._only_run_dir("*-generate-*"), "seed_0")
        code = self._run("train", "--variant", "mur",
                         "--set", "data.kind=tsv",
                         "--set", f"data.path={os.path.join(seed_dir, 'interactions.tsv')}",
                         "--set", f"data.ground_truth={os.path.join(seed_dir, 'ground_truth.tsv')}")
        self.assertEqual(code, EXIT_OK)
        flat = self._metrics(self._only_run_dir("*-train-mur-*"))["seeds"]["0"]
        self.assertIsNotNone(flat["ms_score"])

    def test_train_then_evaluate_is_reproducible(self):
        """Evaluating a saved checkpoint twice gives identical metrics, equal to training's."""
        self.assertEqual(self._run("train", "--variant", "mur"), EXIT_OK)
        train_dir = self._only_run_dir("*-train-mur-*")
        for name in ("history.csv", "checkpoint.pt"):
            self.assertTrue(os.path.exists(os.path.join(train_dir, "seed_0", name)), name)
        checkpoint = os.path.join(train_dir, "seed_0", "checkpoint.pt")

        self.assertEqual(self._run("evaluate", "--checkpoint", checkpoint), EXIT_OK)
        self.assertEqual(self._run("evaluate", "--checkpoint", checkpoint), EXIT_OK)
        eval_dirs = sorted(glob.glob(os.path.join(self.root, "*-evaluate-*")))
        self.assertEqual(len(eval_dirs), 2)
        first, second = (self._metrics(d)["seeds"]["0"] for d in eval_dirs)
        self.assertEqual(first, second)

        trained = self._metrics(train_dir)["seeds"]["0"]
        for a, b in zip(trained["entries"], first["entries"]):
            self.assertEqual((a["split"], a["k"]), (b["split"], b["k"]))
            self.assertAlmostEqual(a["hr"], b["hr"], places=9)

    def test_idw_writes_log(self):
        """idw writes one log row for warm-up and one per iteration."""
        self.assertEqual(self._run("idw", "--variant", "mur_idw"), EXIT_OK)
        seed_dir = os.path.join(self._only_run_dir("*-idw-mur_idw-*"), "seed_0")
        with open(os.path.join(seed_dir, "idw_log.csv"), newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([r["iteration"] for r in rows], ["0", "1"])
        self.assertTrue(os.path.exists(os.path.join(seed_dir, "history.csv")))

    def test_report_summarises_runs(self):
        """report aggregates metrics and writes dataset statistics."""
        self.assertEqual(self._run("train", "--variant", "sur"), EXIT_OK)
        train_dir = self._only_run_dir("*-train-sur-*")
        self.assertEqual(main(["report", "--runs", train_dir, "--output-root", self.root]), EXIT_OK)
        report_dir = self._only_run_dir("*-report-*")
        with open(os.path.join(report_dir, "summary.csv"), newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        metrics = {(r["split"], r["metric"]) for r in rows}
        self.assertIn(("overall", "hr@20"), metrics)
        self.assertIn(("items", "ms"), metrics)
        self.assertTrue(all(r["variant"] == "sur" and r["n"] == "1" for r in rows))
        self.assertTrue(os.path.exists(os.path.join(report_dir, "item_distribution.csv")))
        self.assertTrue(os.path.exists(os.path.join(report_dir, "summary.md")))

    def test_sweep_consolidates(self):
        """A two-value momentum sweep writes one CSV with rows for both values."""
        code = self._run("sweep", "--variant", "mur_idw", "--set", "axis=momentum",
                         "--set", "values=[0.5,0.9]", prefix="base.")
        self.assertEqual(code, EXIT_OK)
        sweep_dir = self._only_run_dir("*-sweep-momentum-*")
        with open(os.path.join(sweep_dir, "sweep.csv"), newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual({float(r["axis_value"]) for r in rows}, {0.5, 0.9})
        self.assertEqual({r["variant"] for r in rows}, {"mur_idw"})
        self.assertEqual(len(glob.glob(os.path.join(sweep_dir, "runs", "*"))), 2)

    def test_sweep_failures_exit_partial(self):
        """Runs that cannot draw enough negatives are recorded and the sweep exits with 3."""
        code = self._run("sweep", "--variant", "mur", "--set", "axis=M", "--set", "values=[1,2]",
                         "--set", "base.eval.num_negatives=45", prefix="base.")
        self.assertEqual(code, EXIT_PARTIAL)
        sweep_dir = self._only_run_dir("*-sweep-M-*")
        with open(os.path.join(sweep_dir, "failures.json"), "r", encoding="utf-8") as f:
            self.assertEqual(len(json.load(f)), 2)
        self.assertTrue(os.path.exists(os.path.join(sweep_dir, "sweep.csv")))


class TestExitCodes(unittest.TestCase):
    """Usage and configuration errors exit with code 1."""

    def setUp(self):
        self.root = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.root, ignore_errors=True)

    def test_unknown_command(self):
        """An unknown subcommand is a usage error."""
        self.assertEqual(main(["fit"]), EXIT_USAGE)

    def test_invalid_value(self):
        """A value failing validation is a usage error."""
        self.assertEqual(main(["train", "--set", "train.batch_size=0", "--output-root", self.root]), EXIT_USAGE)

    def test_unknown_variant(self):
        """An unknown variant name is a usage error."""
        self.assertEqual(main(["train", "--variant", "median", "--output-root", self.root]), EXIT_USAGE)

    def test_variant_command_mismatch(self):
        """An IDW variant under the train command is rejected."""
        self.assertEqual(main(["train", "--variant", "mur_idw", "--output-root", self.root]), EXIT_USAGE)

    def test_missing_checkpoint(self):
        """evaluate without an existing checkpoint is rejected."""
        missing = os.path.join(self.root, "missing.pt")
        self.assertEqual(main(["evaluate", "--checkpoint", missing, "--output-root", self.root]), EXIT_USAGE)

    def test_missing_config_file(self):
        """A --config path that does not exist is rejected."""
        self.assertEqual(main(["train", "--config", os.path.join(self.root, "none.json")]), EXIT_USAGE)


if __name__ == "__main__":
    unittest.main()
