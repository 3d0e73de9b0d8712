import importlib
import tempfile
import unittest
from pathlib import Path

import numpy as np


model_mod = importlib.import_module("cobiaslab.model")
nd = importlib.import_module("cobiaslab.ndcore")
errors = importlib.import_module("cobiaslab.errors")


def _model(seed=0, **kwargs):
    return model_mod.BiasModel(4, 3, nd.RngState(seed), **kwargs)


class BiasModelTests(unittest.TestCase):
    def test_logits_are_head_of_features_bit_for_bit(self):
        model = _model(hidden=(6, 5), feature_dim=4)
        X = np.random.default_rng(1).normal(size=(12, 4))
        composed = model.head.forward(nd.constant(model.features(X))).value
        np.testing.assert_array_equal(model.logits(X), composed)
        _, logits = model.forward(X)
        np.testing.assert_array_equal(logits.value, composed)

    def test_hand_computed_logits(self):
        model = model_mod.BiasModel(2, 2, nd.RngState(3), hidden=(3,), feature_dim=2)
        state = model.state_dict()
        X = np.array([[0.5, -1.0], [2.0, 0.25]])
        hidden = np.tanh(X @ state["extractor.w0"] + state["extractor.b0"])
        features = np.tanh(hidden @ state["extractor.w1"] + state["extractor.b1"])
        logits = features @ state["head.w0"] + state["head.b0"]
        np.testing.assert_allclose(model.logits(X), logits, rtol=1e-12, atol=1e-14)
        self.assertTrue(np.all(np.abs(model.features(X)) <= 1.0))

    def test_zero_head_predicts_first_class(self):
        model = _model()
        for param in model.head.parameters():
            param.value = np.zeros_like(param.value)
        predictions = model.predict(np.random.default_rng(0).normal(size=(7, 4)))
        np.testing.assert_array_equal(predictions, np.zeros(7, dtype=np.int64))

    def test_wrong_input_width_is_rejected(self):
        with self.assertRaises(ValueError):
            _model().predict(np.zeros((2, 5)))

    def test_initialization_depends_only_on_seed(self):
        self.assertEqual(_model(seed=5).checksum(), _model(seed=5).checksum())
        self.assertNotEqual(_model(seed=5).checksum(), _model(seed=6).checksum())

    def test_copy_is_independent(self):
        model = _model()
        clone = model.copy()
        clone.head.biases[0].value = clone.head.biases[0].value + 1.0
        self.assertNotEqual(model.checksum(), clone.checksum())


class FreezeTests(unittest.TestCase):
    def test_frozen_extractor_receives_no_gradient(self):
        model = _model()
        model.freeze_extractor()
        X = np.random.default_rng(2).normal(size=(5, 4))
        _, logits = model.forward(X)
        grads = nd.backward(nd.softmax_cross_entropy(logits, np.array([0, 1, 2, 0, 1])))
        for param in model.extractor.parameters():
            self.assertNotIn(param, grads)
        for param in model.head.parameters():
            self.assertIn(param, grads)
        self.assertEqual(model.trainable_parameters(), model.head.parameters())

    def test_unfreeze_restores_full_training(self):
        model = _model()
        model.freeze_extractor()
        model.unfreeze()
        self.assertEqual(len(model.trainable_parameters()), len(model.parameters()))

    def test_reset_head_keeps_extractor(self):
        model = _model()
        extractor = model.extractor.checksum()
        head = model.head.checksum()
        model.reset_head(nd.RngState(42))
        self.assertEqual(model.extractor.checksum(), extractor)
        self.assertNotEqual(model.head.checksum(), head)


class CheckpointTests(unittest.TestCase):
    def test_save_and_load_preserve_parameters_exactly(self):
        model = _model(seed=8, hidden=(5,), feature_dim=3)
        model.freeze_extractor()
        with tempfile.TemporaryDirectory() as tmp:
            loaded = model_mod.load_model(model_mod.save_model(model, Path(tmp) / "model.json"))
        self.assertEqual(loaded.checksum(), model.checksum())
        self.assertTrue(loaded.extractor_frozen)
        self.assertEqual((loaded.input_dim, loaded.n_classes, loaded.feature_dim), (4, 3, 3))

    def test_checkpoint_file_is_stable(self):
        model = _model(seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            first = model_mod.save_model(model, Path(tmp) / "a.json").read_bytes()
            second = model_mod.save_model(model.copy(), Path(tmp) / "b.json").read_bytes()
        self.assertEqual(first, second)

    def test_invalid_json_is_a_config_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.json"
            path.write_text("{not json", encoding="utf-8")
            with self.assertRaises(errors.ConfigError):
                model_mod.load_model(path)

    def test_wrong_kind_is_rejected(self):
        data = _model().to_checkpoint()
        data["kind"] = "critic"
        with self.assertRaises(errors.ConfigError):
            model_mod.BiasModel.from_checkpoint(data)

    def test_shape_mismatch_is_rejected(self):
        data = _model().to_checkpoint()
        data["parameters"]["head.w0"]["shape"] = [1, 1]
        with self.assertRaises(errors.ConfigError):
            model_mod.BiasModel.from_checkpoint(data)


if __name__ == "__main__":
    unittest.main()
