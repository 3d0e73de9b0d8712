import importlib
import tempfile
import unittest
from pathlib import Path


config_store = importlib.import_module("cobiaslab.config_store")
errors = importlib.import_module("cobiaslab.errors")


SAMPLE = """
[experiment]
seeds = 0, 1, 2
output_dir = results
formats = text, json
jobs = 2
hidden = 16, 8
feature_dim = 6
probe = yes
compute_cobias = false

[dataset]
n = 4000
corr = 0.95
bias_sep = 2.5
shift_corr = 0.6

[train]
epochs = 10
batch = 128
lr = 0.001
beta = 2.0

[critic]
hidden = 32
lr = 0.0005

[estimator]
epochs = 20

[method:erm]

[method:reg]
method = regularizer
beta = 5

[method:dro]
method = group_dro+noise
rho = 0.1
"""


class ParseExperimentConfigTests(unittest.TestCase):
    def test_parses_every_section(self):
        cfg = config_store.parse_experiment_config(SAMPLE)
        self.assertEqual(cfg.seeds, (0, 1, 2))
        self.assertEqual(cfg.formats, ("text", "json"))
        self.assertEqual(cfg.hidden, (16, 8))
        self.assertTrue(cfg.probe)
        self.assertFalse(cfg.report.compute_cobias)
        self.assertEqual(cfg.report.estimator.epochs, 20)
        self.assertEqual(cfg.dataset.corr, 0.95)
        self.assertEqual(cfg.dataset.shift.corr, 0.6)
        self.assertIsNone(cfg.dataset.shift.signal_sep)

    def test_method_sections_inherit_train_defaults(self):
        cfg = config_store.parse_experiment_config(SAMPLE)
        methods = {spec.name: spec.train for spec in cfg.methods}
        self.assertEqual(list(methods), ["erm", "reg", "dro"])
        self.assertEqual(methods["erm"].method, "erm")
        self.assertEqual(methods["erm"].beta, 2.0)
        self.assertEqual(methods["reg"].method, "erm+regularizer")
        self.assertEqual(methods["reg"].beta, 5.0)
        self.assertEqual(methods["dro"].method, "group_dro+noise")
        self.assertEqual(methods["dro"].rho, 0.1)
        for train in methods.values():
            self.assertEqual(train.epochs, 10)
            self.assertEqual(train.critic.hidden, (32,))
            self.assertEqual(train.critic.lr, 0.0005)

    def test_without_method_sections_uses_train_section(self):
        cfg = config_store.parse_experiment_config("[train]\nmethod = noise\n")
        self.assertEqual([spec.name for spec in cfg.methods], ["erm+noise"])
        self.assertEqual(cfg.methods[0].train.critic.lr, 1e-3)

    def test_unknown_key_names_section_and_key(self):
        with self.assertRaises(errors.ConfigError) as ctx:
            config_store.parse_experiment_config("[train]\nepohcs = 3\n")
        self.assertIn("train.epohcs", str(ctx.exception))

    def test_bad_value_names_section_and_key(self):
        with self.assertRaises(errors.ConfigError) as ctx:
            config_store.parse_experiment_config("[dataset]\ncorr = high\n")
        self.assertIn("dataset.corr", str(ctx.exception))

    def test_out_of_range_value_names_section(self):
        with self.assertRaises(errors.ConfigError) as ctx:
            config_store.parse_experiment_config("[dataset]\ncorr = 0.2\n")
        self.assertIn("[dataset]", str(ctx.exception))

    def test_unknown_section_is_rejected(self):
        with self.assertRaises(errors.ConfigError) as ctx:
            config_store.parse_experiment_config("[trian]\nepochs = 3\n")
        self.assertIn("trian", str(ctx.exception))

    def test_unknown_method_component_names_method_section(self):
        with self.assertRaises(errors.ConfigError) as ctx:
            config_store.parse_experiment_config("[method:mix]\nmethod = mixup\n")
        self.assertIn("method:mix", str(ctx.exception))

    def test_shift_separation_needs_shift_corr(self):
        with self.assertRaises(errors.ConfigError):
            config_store.parse_experiment_config("[dataset]\nshift_signal_sep = 1.0\n")

    def test_csv_paths_come_in_pairs(self):
        with self.assertRaises(errors.ConfigError):
            config_store.parse_experiment_config("[dataset]\ntrain_csv = train.csv\n")

    def test_missing_file_is_a_config_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(errors.ConfigError):
                config_store.load_experiment_config(Path(tmp) / "missing.cfg")


class FormatExperimentConfigTests(unittest.TestCase):
    def test_round_trip_preserves_config(self):
        cfg = config_store.parse_experiment_config(SAMPLE)
        text = config_store.format_experiment_config(cfg)
        self.assertEqual(config_store.parse_experiment_config(text), cfg)

    def test_round_trip_through_file(self):
        cfg = config_store.parse_experiment_config(SAMPLE)
        with tempfile.TemporaryDirectory() as tmp:
            path = config_store.save_experiment_config(cfg, Path(tmp) / "nested" / "config.cfg")
            self.assertEqual(config_store.load_experiment_config(path), cfg)

    def test_default_config_round_trips(self):
        cfg = config_store.ExperimentConfig(methods=(config_store.MethodSpec("erm", config_store.TrainConfig()),))
        self.assertEqual(config_store.parse_experiment_config(config_store.format_experiment_config(cfg)), cfg)

    def test_per_method_critic_cannot_be_serialised(self):
        first = config_store.TrainConfig()
        second = config_store.TrainConfig(critic=config_store.EstimatorConfig(lr=0.01))
        cfg = config_store.ExperimentConfig(
            methods=(config_store.MethodSpec("a", first), config_store.MethodSpec("b", second))
        )
        with self.assertRaises(errors.ConfigError):
            config_store.format_experiment_config(cfg)


class EnvFallbackTests(unittest.TestCase):
    def test_load_env_fallback_keeps_known_non_empty_keys(self):
        env = {"COBIAS_SEED": " 7 ", "COBIAS_JOBS": "", "PATH": "/bin"}
        self.assertEqual(config_store.load_env_fallback(env), {"COBIAS_SEED": "7"})

    def test_apply_env_fallback_overrides_seeds_and_jobs(self):
        cfg = config_store.parse_experiment_config(SAMPLE)
        updated = config_store.apply_env_fallback(cfg, {"COBIAS_SEED": "7", "COBIAS_JOBS": "4"})
        self.assertEqual(updated.seeds, (7,))
        self.assertEqual(updated.jobs, 4)
        self.assertEqual(updated.methods, cfg.methods)

    def test_apply_env_fallback_without_values_returns_same_config(self):
        cfg = config_store.parse_experiment_config(SAMPLE)
        self.assertIs(config_store.apply_env_fallback(cfg, {}), cfg)

    def test_invalid_env_values(self):
        cfg = config_store.parse_experiment_config(SAMPLE)
        with self.assertRaises(errors.ConfigError):
            config_store.apply_env_fallback(cfg, {"COBIAS_SEED": "seven"})
        with self.assertRaises(errors.ConfigError):
            config_store.apply_env_fallback(cfg, {"COBIAS_JOBS": "0"})

    def test_env_jobs_default(self):
        self.assertEqual(config_store.env_jobs_default({}, fallback=3), 3)
        self.assertEqual(config_store.env_jobs_default({"COBIAS_JOBS": "0"}), 1)
        with self.assertRaises(errors.ConfigError):
            config_store.env_jobs_default({"COBIAS_JOBS": "many"})


if __name__ == "__main__":
    unittest.main()
