import importlib
import json
import os
import statistics
import tempfile
import unittest
from pathlib import Path


runtime = importlib.import_module("cobiaslab.runtime_support")
config_store = importlib.import_module("cobiaslab.config_store")

SLOW = os.environ.get("COBIAS_SLOW_TESTS") == "1"

TINY = """
[experiment]
seeds = 0, 1
hidden = 8
feature_dim = 4
probe = true

[dataset]
n = 300

[train]
epochs = 2
batch = 32
lr = 0.001
probe_epochs = 1

[critic]
hidden = 8

[estimator]
epochs = 2
batch = 64
hidden = 8
eval_window = 1
min_samples = 100

[method:erm]

[method:group_dro+regularizer]
beta = 1
"""

DESK_SCALE = """
[experiment]
seeds = 0, 1, 2, 3, 4
jobs = 4
probe = {probe}

[dataset]
corr = 0.95

{methods}
"""

TABLE_METHODS = """
[method:erm]

[method:regularizer]

[method:noise]

[method:group_dro]
"""


def _median(reports, method, key):
    return statistics.median(report[key] for report in reports if report["method"] == method)


class DeterminismTests(unittest.TestCase):
    def test_repeated_experiment_writes_identical_files(self):
        cfg = config_store.parse_experiment_config(TINY)
        with tempfile.TemporaryDirectory() as tmp:
            outputs = []
            for name in ("first", "second"):
                out = Path(tmp) / name
                run_dirs = runtime.run_experiment(cfg, out, jobs=2)
                rows = runtime.summarize_reports(runtime.load_reports(run_dirs))
                runtime.write_tables(rows, out, ("csv", "json"), "summary")
                outputs.append(out)
            first, second = outputs
            files = sorted(path.relative_to(first) for path in first.rglob("*") if path.is_file())
            self.assertIn(Path("summary.json"), files)
            self.assertIn(Path("group_dro+regularizer/seed-1/critic.json"), files)
            for relative in files:
                with self.subTest(file=str(relative)):
                    self.assertEqual((first / relative).read_bytes(), (second / relative).read_bytes())

    def test_run_report_lists_head_refit_sections(self):
        cfg = config_store.parse_experiment_config(TINY.replace("seeds = 0, 1", "seeds = 3"))
        with tempfile.TemporaryDirectory() as tmp:
            run_dirs = runtime.run_experiment(cfg, tmp, jobs=1)
            report = json.loads((run_dirs[0] / "report.json").read_text(encoding="utf-8"))
        self.assertEqual(sorted(report), ["method", "probe_after", "probe_before", "seed", "test", "train_method"])
        self.assertEqual(report["probe_before"]["feature_digest"], report["probe_after"]["feature_digest"])


@unittest.skipUnless(SLOW, "set COBIAS_SLOW_TESTS=1 for the paired-seed method comparison")
class MethodComparisonTests(unittest.TestCase):
    """Five paired seeds on the corr = 0.95 synthetic task, compared by medians."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cfg = config_store.parse_experiment_config(DESK_SCALE.format(probe="false", methods=TABLE_METHODS))
        run_dirs = runtime.run_experiment(cfg, Path(cls.tmp.name) / "table")
        cls.reports = runtime.load_reports(run_dirs)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_cobias_orders_regularizer_below_noise_below_erm(self):
        erm = _median(self.reports, "erm", "cobias")
        noise = _median(self.reports, "noise", "cobias")
        regularizer = _median(self.reports, "regularizer", "cobias")
        self.assertLess(regularizer, noise)
        self.assertLess(noise, erm)

    def test_regularizer_lifts_worst_group_accuracy(self):
        erm = _median(self.reports, "erm", "worst_group_acc")
        self.assertGreaterEqual(_median(self.reports, "regularizer", "worst_group_acc"), erm + 0.05)
        self.assertGreater(_median(self.reports, "group_dro", "worst_group_acc"), erm)

    def test_debiasing_costs_little_average_accuracy(self):
        erm = _median(self.reports, "erm", "average_acc")
        for method in ("regularizer", "noise"):
            with self.subTest(method=method):
                self.assertGreaterEqual(_median(self.reports, method, "average_acc"), erm - 0.03)


@unittest.skipUnless(SLOW, "set COBIAS_SLOW_TESTS=1 for the ablation sweeps")
class AblationSweepTests(unittest.TestCase):
    def test_cobias_falls_as_beta_grows(self):
        cfg = config_store.parse_experiment_config(
            DESK_SCALE.format(probe="false", methods="[method:regularizer]")
        )
        with tempfile.TemporaryDirectory() as tmp:
            rows = runtime.run_sweep(cfg, "beta", [0.0, 1.0, 2.0, 5.0, 10.0], out_dir=tmp)
        self.assertEqual(len(rows), 5)
        self.assertLessEqual(rows[0]["cobias_spearman"], -0.8)

    def test_cobias_strictly_falls_as_noise_rate_grows(self):
        cfg = config_store.parse_experiment_config(DESK_SCALE.format(probe="false", methods="[method:noise]"))
        with tempfile.TemporaryDirectory() as tmp:
            rows = runtime.run_sweep(cfg, "rho", [0.0, 0.1, 0.2], out_dir=tmp)
        medians = [row["cobias_median"] for row in sorted(rows, key=lambda row: row["rho"])]
        self.assertTrue(all(a > b for a, b in zip(medians, medians[1:])), medians)


@unittest.skipUnless(SLOW, "set COBIAS_SLOW_TESTS=1 for the head-refit comparison")
class HeadRefitFindingTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cfg = config_store.parse_experiment_config(DESK_SCALE.format(probe="true", methods="[method:erm]"))
        run_dirs = runtime.run_experiment(cfg, Path(cls.tmp.name) / "probe")
        cls.before = runtime.load_reports(run_dirs, key="probe_before")
        cls.after = runtime.load_reports(run_dirs, key="probe_after")

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_head_refit_lifts_worst_group_accuracy(self):
        before = _median(self.before, "erm", "worst_group_acc")
        after = _median(self.after, "erm", "worst_group_acc")
        self.assertGreaterEqual(after, before + 0.05)

    def test_features_and_cobias_stay_put(self):
        spread = max(report["cobias"] for report in self.before) - min(report["cobias"] for report in self.before)
        for before, after in zip(self.before, self.after):
            with self.subTest(seed=before["seed"]):
                self.assertEqual(before["feature_digest"], after["feature_digest"])
                self.assertLessEqual(abs(after["cobias"] - before["cobias"]), 2.0 * spread)


if __name__ == "__main__":
    unittest.main()
