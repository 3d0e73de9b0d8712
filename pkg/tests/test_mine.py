import importlib
import json
import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np


mine = importlib.import_module("cobiaslab.mine")
nd = importlib.import_module("cobiaslab.ndcore")
info = importlib.import_module("cobiaslab.infomeasure")
model_mod = importlib.import_module("cobiaslab.model")
constants = importlib.import_module("cobiaslab.constants")
errors = importlib.import_module("cobiaslab.errors")
utils = importlib.import_module("cobiaslab.utils")

SLOW = os.environ.get("COBIAS_SLOW_TESTS") == "1"


def _gaussian_pair(rho, n, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    v = rho * u + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return u, v


def _small_cfg(**overrides):
    values = dict(epochs=3, batch=32, hidden=(8,), eval_window=2, min_samples=50)
    values.update(overrides)
    return mine.EstimatorConfig(**values)


def _zero_network(u_dim=1, v_dim=1):
    net = mine.StatisticsNetwork(u_dim, v_dim, nd.RngState(0), hidden=(4,))
    for param in net.parameters():
        param.value = np.zeros_like(param.value)
    return net


def _sample_joint(probs, n, seed):
    probs = np.asarray(probs, dtype=np.float64)
    cells = np.random.default_rng(seed).choice(probs.size, size=n, p=probs.ravel())
    return np.unravel_index(cells, probs.shape)


def _labels_with_bias(n, corr, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    z = np.where(rng.random(n) < corr, y, 1 - y)
    return y, z, rng


class EstimatorConfigTests(unittest.TestCase):
    def test_defaults(self):
        cfg = mine.EstimatorConfig()
        self.assertEqual(cfg.batch, 256)
        self.assertEqual(cfg.eval_window, 10)
        self.assertEqual(cfg.clip, constants.CRITIC_CLIP)

    def test_batch_below_minimum_is_rejected(self):
        with self.assertRaises(ValueError):
            mine.EstimatorConfig(batch=constants.MIN_DV_BATCH - 1)

    def test_ema_decay_range(self):
        with self.assertRaises(ValueError):
            mine.EstimatorConfig(ema_decay=1.0)


class DvBoundTests(unittest.TestCase):
    def test_permutation_is_a_reordering(self):
        perm = mine.draw_permutation(50, np.random.default_rng(1))
        np.testing.assert_array_equal(np.sort(perm), np.arange(50))

    def test_zero_critic_gives_zero_bound(self):
        rng = np.random.default_rng(0)
        result = mine.dv_bound(_zero_network(), rng.normal(size=(16, 1)), rng.normal(size=(16, 1)), rng)
        self.assertAlmostEqual(result.bound_value, 0.0, places=12)
        self.assertAlmostEqual(result.joint_term, 0.0, places=12)
        self.assertAlmostEqual(result.marginal_term, 0.0, places=12)

    def test_constant_critic_gives_zero_bound(self):
        net = _zero_network(2, 3)
        net.mlp.biases[-1].value = np.full((1, 1), 2.5)
        rng = np.random.default_rng(4)
        result = mine.dv_bound(net, rng.normal(size=(32, 2)), rng.normal(size=(32, 3)), rng)
        self.assertAlmostEqual(result.joint_term, result.marginal_term, places=12)
        self.assertAlmostEqual(result.bound_value, 0.0, places=12)

    def test_fixed_permutation_matches_hand_computation(self):
        net = mine.StatisticsNetwork(1, 1, nd.RngState(5), hidden=(3,))
        rng = np.random.default_rng(2)
        u = rng.normal(size=(10, 1))
        v = rng.normal(size=(10, 1))
        perm = np.roll(np.arange(10), 1)
        result = mine.dv_bound(net, u, v, rng, permutation=perm)
        joint = net.score(nd.constant(u), nd.constant(v)).value
        shuffled = net.score(nd.constant(u), nd.constant(v[perm])).value
        expected = joint.mean() - (np.log(np.exp(shuffled).sum()) - math.log(10))
        self.assertAlmostEqual(result.bound_value, float(expected), places=10)

    def test_small_batch_is_rejected(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(ValueError):
            mine.dv_bound(_zero_network(), rng.normal(size=(7, 1)), rng.normal(size=(7, 1)), rng)

    def test_misaligned_batches_are_rejected(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(ValueError):
            mine.dv_bound(_zero_network(), rng.normal(size=(10, 1)), rng.normal(size=(12, 1)), rng)

    def test_scores_are_soft_clipped(self):
        net = mine.StatisticsNetwork(1, 1, nd.RngState(0), hidden=(2,), clip=30.0)
        net.mlp.biases[-1].value = np.full((1, 1), 1000.0)
        score = net.score(nd.constant(np.zeros((3, 1))), nd.constant(np.zeros((3, 1))))
        self.assertTrue(np.all(score.value <= 30.0))


class TrainEstimatorTests(unittest.TestCase):
    def test_too_few_samples_is_rejected(self):
        u, v = _gaussian_pair(0.5, 40, 0)
        with self.assertRaises(ValueError):
            mine.train_mi_estimator(u, v, _small_cfg(), nd.RngState(0))

    def test_same_seed_reproduces_network_and_estimate(self):
        u, v = _gaussian_pair(0.5, 200, 1)
        first_net, first, first_history = mine.train_mi_estimator(u, v, _small_cfg(), nd.RngState(9))
        second_net, second, second_history = mine.train_mi_estimator(u, v, _small_cfg(), nd.RngState(9))
        self.assertEqual(first_net.checksum(), second_net.checksum())
        self.assertEqual(first.value, second.value)
        self.assertEqual(first_history, second_history)

    def test_estimate_averages_last_evaluations(self):
        u, v = _gaussian_pair(0.5, 200, 2)
        _, estimate, history = mine.train_mi_estimator(u, v, _small_cfg(epochs=4), nd.RngState(3))
        self.assertEqual(len(history), 4)
        self.assertAlmostEqual(estimate.value, float(np.mean(history[-2:])), places=12)
        self.assertEqual(estimate.estimator, constants.ESTIMATOR_DV)
        self.assertEqual(estimate.n_samples, 200)

    def test_moving_average_variant_runs(self):
        u, v = _gaussian_pair(0.5, 200, 4)
        _, estimate, history = mine.train_mi_estimator(u, v, _small_cfg(ema_decay=0.9), nd.RngState(3))
        self.assertEqual(len(history), 3)
        self.assertTrue(math.isfinite(estimate.value))

    def test_divergence_limit_raises_numerical_error(self):
        u, v = _gaussian_pair(0.5, 200, 5)
        with self.assertRaises(errors.NumericalError) as ctx:
            mine.train_mi_estimator(u, v, _small_cfg(divergence_limit=1e-12), nd.RngState(0))
        self.assertIn("diverged", str(ctx.exception))

    def test_correlated_gaussians_fast(self):
        u, v = _gaussian_pair(0.8, 3000, 6)
        cfg = mine.EstimatorConfig(epochs=30, batch=128, lr=3e-3, hidden=(32,), min_samples=1000)
        _, estimate, _ = mine.train_mi_estimator(u, v, cfg, nd.RngState(0))
        self.assertGreater(estimate.value, 0.2)
        self.assertLess(estimate.value, info.gaussian_mi_oracle(0.8) + 0.15)

    def test_independent_inputs_stay_near_zero(self):
        rng = np.random.default_rng(7)
        u = rng.standard_normal(2000)
        v = rng.standard_normal(2000)
        cfg = mine.EstimatorConfig(epochs=15, batch=128, hidden=(32,), min_samples=1000)
        _, estimate, _ = mine.train_mi_estimator(u, v, cfg, nd.RngState(0))
        self.assertLess(abs(estimate.value), 0.1)

    def test_discrete_bound_stays_below_plugin_information(self):
        joints = {
            "binary": [[0.45, 0.05], [0.05, 0.45]],
            "three-way": [[0.2, 0.05, 0.05], [0.05, 0.2, 0.05], [0.05, 0.05, 0.3]],
            "independent": [[0.25, 0.25], [0.25, 0.25]],
        }
        cfg = mine.EstimatorConfig(epochs=15, batch=128, hidden=(16,), min_samples=1000)
        for seed, (name, probs) in enumerate(joints.items()):
            with self.subTest(joint=name):
                a, b = _sample_joint(probs, 3000, seed)
                exact = info.exact_mi(info.ContingencyTable.from_samples(a, b)).value
                u = utils.one_hot(a, len(probs))
                v = utils.one_hot(b, len(probs[0]))
                _, estimate, _ = mine.train_mi_estimator(u, v, cfg, nd.RngState(seed))
                self.assertLessEqual(estimate.value, exact + 0.05)

    @unittest.skipUnless(SLOW, "set COBIAS_SLOW_TESTS=1 for the calibration run")
    def test_correlated_gaussians_calibration(self):
        rhos = (0.2, 0.5, 0.8)
        passing = 0
        for seed in range(10):
            estimates = []
            for rho in rhos:
                u, v = _gaussian_pair(rho, 10000, 100 + seed)
                _, estimate, _ = mine.train_mi_estimator(u, v, mine.EstimatorConfig(), nd.RngState(seed))
                estimates.append(estimate.value)
            oracle = [info.gaussian_mi_oracle(rho) for rho in rhos]
            inside = all(truth - 0.08 <= value <= truth + 0.03 for value, truth in zip(estimates, oracle))
            increasing = all(a < b for a, b in zip(estimates, estimates[1:]))
            passing += int(inside and increasing)
        self.assertGreaterEqual(passing, 9)


class CobiasEstimateTests(unittest.TestCase):
    def test_value_is_difference_of_components(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, size=200)
        z = np.where(rng.random(200) < 0.8, y, 1 - y)
        features = np.column_stack([y + 0.1 * rng.standard_normal(200), z + 0.1 * rng.standard_normal(200)])
        estimate = mine.estimate_cobias(features, z, y, _small_cfg(), nd.RngState(1))
        joint, target = estimate.components
        self.assertAlmostEqual(estimate.value, joint.value - target.value, places=12)
        self.assertEqual(estimate.estimator, constants.ESTIMATOR_DV_DIFFERENCE)
        self.assertFalse(estimate.is_lower_bound)
        self.assertEqual(estimate.n_samples, 200)
        for component in estimate.components:
            self.assertEqual(component.estimator, constants.ESTIMATOR_DV)
            self.assertTrue(component.is_lower_bound)

    def test_same_seed_is_reproducible_across_threads(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 2, size=120)
        z = rng.integers(0, 2, size=120)
        features = rng.normal(size=(120, 3))
        first = mine.estimate_cobias(features, z, y, _small_cfg(), nd.RngState(4))
        second = mine.estimate_cobias(features, z, y, _small_cfg(), nd.RngState(4))
        self.assertEqual(first.value, second.value)

    def test_misaligned_inputs_are_rejected(self):
        with self.assertRaises(ValueError):
            mine.estimate_cobias(np.zeros((10, 2)), [0] * 9, [0] * 10, _small_cfg(), nd.RngState(0))

    @unittest.skipUnless(SLOW, "set COBIAS_SLOW_TESTS=1 for the discretized-feature comparison")
    def test_matches_exact_conditional_information_on_discrete_features(self):
        n = 5000
        y, z, rng = _labels_with_bias(n, 0.8, 21)
        coin = rng.random(n) < 0.75
        constructions = {
            "target and bias": (2 * y + z, 4),
            "target only": (y, 2),
            "bias only": (z, 2),
            "parity": (y ^ z, 2),
            "noisy bias copy": (np.where(coin, z, rng.integers(0, 2, size=n)), 2),
        }
        for seed, (name, (cells, width)) in enumerate(constructions.items()):
            with self.subTest(features=name):
                table = info.ContingencyTable.from_samples(cells, z, y, cardinalities=(width, 2, 2))
                exact = info.exact_conditional_mi(table, given=2).value
                features = utils.one_hot(cells, width)
                estimate = mine.estimate_cobias(features, z, y, mine.EstimatorConfig(), nd.RngState(seed))
                self.assertAlmostEqual(estimate.value, exact, delta=max(0.1, 0.2 * exact))


class SurrogateTermTests(unittest.TestCase):
    def test_width_mismatch_is_reported(self):
        net = mine.StatisticsNetwork(3, 2, nd.RngState(0), hidden=(4,))
        features = nd.parameter(np.zeros((16, 4)), "features")
        labels = np.arange(16) % 2
        with self.assertRaises(ValueError) as ctx:
            mine.surrogate_bias_term(net, features, labels, labels, 2, 2, np.random.default_rng(0))
        self.assertIn("d_f + A + B", str(ctx.exception))

    def test_gradient_reaches_features(self):
        rng = np.random.default_rng(3)
        features = nd.parameter(rng.normal(size=(16, 3)), "features")
        y = np.arange(16) % 2
        z = (np.arange(16) // 2) % 2
        net = mine.StatisticsNetwork(3 + 2, 2, nd.RngState(1), hidden=(6,))
        term = mine.surrogate_bias_term(net, features, y, z, 2, 2, rng)
        grads = nd.backward(term)
        self.assertEqual(grads[features].shape, (16, 3))
        self.assertGreater(float(np.abs(grads[features]).sum()), 0.0)

    def test_term_equals_bound_on_detached_concatenation(self):
        rng = np.random.default_rng(6)
        features = rng.normal(size=(24, 3))
        y = rng.integers(0, 3, size=24)
        z = rng.integers(0, 2, size=24)
        net = mine.StatisticsNetwork(3 + 3, 2, nd.RngState(2), hidden=(5,))
        term = mine.surrogate_bias_term(
            net, nd.parameter(features.copy(), "features"), y, z, 3, 2, np.random.default_rng(11)
        )
        detached = mine.dv_bound(
            net,
            np.concatenate([features, utils.one_hot(y, 3)], axis=1),
            utils.one_hot(z, 2),
            np.random.default_rng(11),
        )
        self.assertEqual(term.item(), detached.bound_value)

    def test_inputs_stack_target_one_hot_next_to_features(self):
        features = nd.constant(np.ones((4, 2)))
        u, v = mine.surrogate_inputs(features, [0, 1, 2, 0], [1, 0, 1, 1], 3, 2)
        self.assertEqual(u.shape, (4, 5))
        self.assertEqual(v.shape, (4, 2))
        np.testing.assert_array_equal(u.value[1], [1.0, 1.0, 0.0, 1.0, 0.0])


class CriticCheckpointTests(unittest.TestCase):
    def test_round_trip_through_json(self):
        net = mine.StatisticsNetwork(4, 3, nd.RngState(8), hidden=(5, 6), clip=12.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = model_mod.save_checkpoint(net.to_checkpoint(), Path(tmp) / "critic.json")
            loaded = mine.StatisticsNetwork.from_checkpoint(model_mod.load_checkpoint(path))
        self.assertEqual(loaded.checksum(), net.checksum())
        self.assertEqual((loaded.u_dim, loaded.v_dim, loaded.clip), (4, 3, 12.0))

    def test_model_checkpoint_is_not_a_critic(self):
        model = model_mod.BiasModel(3, 2, nd.RngState(0))
        with self.assertRaises(errors.ConfigError):
            mine.StatisticsNetwork.from_checkpoint(model.to_checkpoint())

    def test_truncated_parameters_raise_config_error(self):
        data = json.loads(json.dumps(mine.StatisticsNetwork(1, 1, nd.RngState(0), hidden=(2,)).to_checkpoint()))
        data["parameters"]["critic.w0"]["values"] = [0.0]
        with self.assertRaises(errors.ConfigError):
            mine.StatisticsNetwork.from_checkpoint(data)


if __name__ == "__main__":
    unittest.main()
